//! Effective training configuration: desk or reference defaults, overridden
//! by a key=value config file, `--set` pairs and dedicated flags (in that
//! order). Unknown keys are rejected by name.

use std::path::PathBuf;

use mfpnet::model::{ModelSpec, Variant};
use mfpnet::phantom::AugmentConfig;
use mfpnet::train::{LrSchedule, TrainConfig};
use mfpnet::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub variant: Variant,
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub input_extent: usize,
    pub halve_reuse: bool,
    pub epochs: u32,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub checkpoint_every: u32,
}

impl TrainSettings {
    /// Desk-scale defaults: 64x64 slices, base channels 8, batch 8,
    /// 30 epochs.
    pub fn desk() -> TrainSettings {
        TrainSettings {
            variant: Variant::MfpBica,
            levels: 5,
            base_channels: 8,
            in_channels: 1,
            classes: 6,
            input_extent: 64,
            halve_reuse: true,
            epochs: 30,
            batch: 8,
            seed: 7,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            augment: true,
            checkpoint_every: 1,
        }
    }

    /// The documented reference configuration: batch 32, 400 epochs,
    /// initial lr 0.01, 256x256 slices, base channels 16.
    pub fn reference() -> TrainSettings {
        TrainSettings {
            base_channels: 16,
            input_extent: 256,
            epochs: 400,
            batch: 32,
            ..TrainSettings::desk()
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_line(line)?;
        }
        Ok(())
    }

    pub fn apply_line(&mut self, line: &str) -> Result<()> {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| Error::config(format!("{key}: invalid value {v:?}")))
        }
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "levels" => self.levels = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "input_extent" => self.input_extent = num(key, value)?,
            "halve_reuse" => self.halve_reuse = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "augment" => self.augment = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, args: &crate::TrainArgs) -> Result<()> {
        if let Some(v) = &args.variant {
            self.variant = Variant::parse(v)?;
        }
        if let Some(v) = args.levels {
            self.levels = v;
        }
        if let Some(v) = args.base_channels {
            self.base_channels = v;
        }
        if let Some(v) = args.classes {
            self.classes = v;
        }
        if let Some(v) = args.epochs {
            self.epochs = v;
        }
        if let Some(v) = args.batch {
            self.batch = v;
        }
        if let Some(v) = args.seed {
            self.seed = v;
        }
        if let Some(v) = args.lr {
            self.lr = v;
        }
        if let Some(v) = args.momentum {
            self.momentum = v;
        }
        if let Some(v) = args.weight_decay {
            self.weight_decay = v;
        }
        if args.no_augment {
            self.augment = false;
        }
        Ok(())
    }

    /// One-line-per-group echo of the effective configuration.
    pub fn echo(&self) -> String {
        format!(
            "config: variant={} levels={} base_channels={} in_channels={} classes={} input_extent={}\n\
             config: epochs={} batch={} lr={} momentum={} weight_decay={} seed={} augment={}",
            self.variant.as_str(),
            self.levels,
            self.base_channels,
            self.in_channels,
            self.classes,
            self.input_extent,
            self.epochs,
            self.batch,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.seed,
            self.augment
        )
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            levels: self.levels,
            base_channels: self.base_channels,
            in_channels: self.in_channels,
            classes: self.classes,
            input_extent: self.input_extent,
            halve_reuse_channels: self.halve_reuse,
        }
    }

    pub fn to_train_config(&self, data_dir: PathBuf, out_dir: PathBuf) -> Result<TrainConfig> {
        let spec = self.model_spec();
        spec.validate()?;
        Ok(TrainConfig {
            spec,
            data_dir,
            out_dir,
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch,
            schedule: LrSchedule::new(vec![
                (0, self.lr),
                (200, self.lr / 10.0),
                (300, self.lr / 100.0),
            ])?,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: if self.augment { AugmentConfig::default() } else { AugmentConfig::identity() },
            checkpoint_every: self.checkpoint_every,
            log_walltime: true,
            resume_from: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_settings_echo_paper_values() {
        let echo = TrainSettings::reference().echo();
        assert!(echo.contains("batch=32"), "{echo}");
        assert!(echo.contains("epochs=400"), "{echo}");
        assert!(echo.contains("lr=0.01"), "{echo}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainSettings::desk().apply_line("frobnicate=1").unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
    }

    #[test]
    fn file_then_set_overrides() {
        let mut s = TrainSettings::desk();
        s.apply_text("epochs=10\nbatch=4\n").unwrap();
        s.apply_line("epochs=3").unwrap();
        assert_eq!(s.epochs, 3);
        assert_eq!(s.batch, 4);
    }
}
