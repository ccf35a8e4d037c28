//! Training and evaluation: the segmentation loss, SGD with momentum and
//! coupled L2 weight decay, the step learning-rate schedule, the epoch loop
//! with checkpointing, and checkpoint evaluation into a metric report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{load_cases, read_manifest, Case};
use crate::error::{Error, Result};
use crate::graph::{GradientSet, Graph, NodeId};
use crate::metrics::{
    aggregate_report, dice_volumetric, msd, CaseMetrics, LabelVolume, MetricReport, ORGANS,
};
use crate::model::{Model, ModelSpec};
use crate::params::ParameterSet;
use crate::phantom::{augment, normalize_slice, AugmentConfig};
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Integer class labels for one batch, shape (B, H, W).
#[derive(Debug, Clone)]
pub struct LabelBatch {
    pub shape: (usize, usize, usize),
    pub data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(shape: (usize, usize, usize), data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::shape(format!(
                "label batch: {} values do not fill {shape:?}",
                data.len()
            )));
        }
        Ok(LabelBatch { shape, data })
    }
}

/// Loss graph nodes: the total plus its two terms.
pub struct LossParts {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub dice_term: NodeId,
}

const DICE_SMOOTH: f64 = 1e-6;

/// Mean pixelwise cross-entropy (after channel softmax) plus
/// `1 - mean foreground soft Dice`, equally weighted.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &LabelBatch,
) -> Result<LossParts> {
    let (b, k, h, w) = g.value(logits).dims4()?;
    if labels.shape != (b, h, w) {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits ({b}, {h}, {w})",
            labels.shape
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }

    // One-hot constant (B, K, H, W) and per-class voxel counts.
    let plane = h * w;
    let mut onehot = vec![T::zero(); b * k * plane];
    let mut class_counts = vec![0.0f64; k];
    for bi in 0..b {
        for p in 0..plane {
            let c = labels.data[bi * plane + p] as usize;
            onehot[(bi * k + c) * plane + p] = T::one();
            class_counts[c] += 1.0;
        }
    }
    let onehot = g.constant(Tensor::from_vec(&[b, k, h, w], onehot)?);

    let logp = g.log_softmax_ch(logits)?;
    let picked = g.mul(onehot, logp)?;
    let sum = g.sum_all(picked)?;
    let cross_entropy = g.scale(sum, -1.0 / (b * plane) as f64)?;

    let probs = g.softmax_ch(logits)?;
    let inter = g.mul(probs, onehot)?;
    let inter_c = g.sum_per_channel(inter)?;
    let pred_c = g.sum_per_channel(probs)?;
    let truth_c = g.constant(Tensor::from_vec(
        &[k],
        class_counts.iter().map(|&v| T::from_f64(v)).collect(),
    )?);
    let num = g.scale(inter_c, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(pred_c, truth_c)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let dice_c = g.div(num, den)?;
    // Mean over foreground classes only.
    let mut fg = vec![T::zero(); k];
    for v in fg.iter_mut().take(k).skip(1) {
        *v = T::from_f64(1.0 / (k - 1) as f64);
    }
    let fg = g.constant(Tensor::from_vec(&[k], fg)?);
    let weighted = g.mul(dice_c, fg)?;
    let mean_dice = g.sum_all(weighted)?;
    let neg = g.scale(mean_dice, -1.0)?;
    let dice_term = g.add_scalar(neg, 1.0)?;

    let total = g.add(cross_entropy, dice_term)?;
    Ok(LossParts { total, cross_entropy, dice_term })
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// SGD state: per-parameter momentum buffers plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParameterSet<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        let velocity = params
            .iter()
            .map(|(name, t)| Ok((name.clone(), Tensor::zeros(t.shape())?)))
            .collect::<Result<_>>()?;
        Ok(OptimState { momentum, weight_decay, velocity })
    }
}

/// One heavy-ball step with coupled L2 decay:
/// `g' = g + wd * w; v = momentum * v + g'; w -= lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &GradientSet<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    for (name, w) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter {name:?}")))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no velocity for parameter {name:?}")))?;
        if grad.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::contract(format!("shape mismatch updating {name:?}")));
        }
        let mut w_data = std::mem::replace(w, Tensor::scalar(T::zero())).into_data();
        let mut v_data = std::mem::replace(v, Tensor::scalar(T::zero())).into_data();
        for (wi, (vi, gi)) in w_data.iter_mut().zip(v_data.iter_mut().zip(grad.data())) {
            let decayed = gi.to_f64() + state.weight_decay * wi.to_f64();
            let vel = state.momentum * vi.to_f64() + decayed;
            *vi = T::from_f64(vel);
            *wi = T::from_f64(wi.to_f64() - lr * vel);
        }
        *w = Tensor::from_vec(grad.shape(), w_data)?;
        *v = Tensor::from_vec(grad.shape(), v_data)?;
    }
    Ok(())
}

/// Piecewise-constant learning-rate schedule keyed by epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    /// Sorted (epoch, lr) breakpoints; the first entry must be epoch 0.
    pub breakpoints: Vec<(u32, f64)>,
}

impl LrSchedule {
    pub fn new(breakpoints: Vec<(u32, f64)>) -> Result<LrSchedule> {
        if breakpoints.first().map(|b| b.0) != Some(0) {
            return Err(Error::config("schedule must start at epoch 0".to_string()));
        }
        for pair in breakpoints.windows(2) {
            if pair[1].0 <= pair[0].0 || pair[1].1 > pair[0].1 {
                return Err(Error::config(
                    "schedule breakpoints must be increasing in epoch, non-increasing in lr"
                        .to_string(),
                ));
            }
        }
        Ok(LrSchedule { breakpoints })
    }

    /// The reference schedule: 0.01, dropping to 0.001 and 0.0001 at epochs
    /// 200 and 300.
    pub fn reference() -> LrSchedule {
        LrSchedule { breakpoints: vec![(0, 0.01), (200, 0.001), (300, 0.0001)] }
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        let mut lr = self.breakpoints[0].1;
        for &(e, v) in &self.breakpoints {
            if epoch >= e {
                lr = v;
            }
        }
        lr
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"MFPC";
const CKPT_VERSION: u16 = 1;

/// Everything needed to resume training bit-for-bit from an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Completed epochs.
    pub epoch: u32,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub best_val_dice: f64,
    pub params: ParameterSet<f32>,
    pub velocity: BTreeMap<String, Tensor<f32>>,
}

fn put_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32("record name length")? as usize;
        let name = String::from_utf8(self.take(name_len, "record name")?.to_vec())
            .map_err(|_| Error::Format {
                offset: self.pos as u64,
                message: "record name is not utf-8".to_string(),
            })?;
        let rank = self.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("record dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = self.take(n * 4, "record payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let spec_text = self.spec.to_config_text();
        out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
        out.extend_from_slice(spec_text.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.momentum.to_le_bytes());
        out.extend_from_slice(&self.weight_decay.to_le_bytes());
        out.extend_from_slice(&self.best_val_dice.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            put_record(&mut out, name, tensor);
        }
        out.extend_from_slice(&(self.velocity.len() as u32).to_le_bytes());
        for (name, tensor) in &self.velocity {
            put_record(&mut out, name, tensor);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected \"MFPC\"".to_string(),
            });
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let spec_len = r.u32("spec length")? as usize;
        let spec_text = String::from_utf8(r.take(spec_len, "spec block")?.to_vec())
            .map_err(|_| Error::Format {
                offset: r.pos as u64,
                message: "spec block is not utf-8".to_string(),
            })?;
        let spec = ModelSpec::from_config_text(&spec_text)?;
        let epoch = r.u32("epoch")?;
        let seed = r.u64("seed")?;
        let momentum = r.f64("momentum")?;
        let weight_decay = r.f64("weight decay")?;
        let best_val_dice = r.f64("best val dice")?;
        let n_params = r.u32("parameter count")? as usize;
        let mut params = ParameterSet::new();
        for _ in 0..n_params {
            let (name, tensor) = r.record()?;
            params.insert(name, tensor)?;
        }
        let n_vel = r.u32("velocity count")? as usize;
        let mut velocity = BTreeMap::new();
        for _ in 0..n_vel {
            let (name, tensor) = r.record()?;
            velocity.insert(name, tensor);
        }
        Ok(Checkpoint { spec, epoch, seed, momentum, weight_decay, best_val_dice, params, velocity })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One per-epoch record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_dice,wall_secs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.3}\n",
                r.epoch, r.lr, r.train_loss, r.val_dice, r.wall_secs
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    /// Write `last.ckpt` every this many epochs (always at the end).
    pub checkpoint_every: u32,
    /// Record wall-clock seconds in the log. Disabled in the deterministic
    /// reference mode so logs are byte-identical across runs.
    pub log_walltime: bool,
    pub resume_from: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale defaults for a given data/output location.
    pub fn desk(spec: ModelSpec, data_dir: PathBuf, out_dir: PathBuf, seed: u64) -> TrainConfig {
        TrainConfig {
            spec,
            data_dir,
            out_dir,
            seed,
            epochs: 30,
            batch_size: 8,
            schedule: LrSchedule::reference(),
            momentum: 0.9,
            weight_decay: 0.001,
            augment: AugmentConfig::default(),
            checkpoint_every: 1,
            log_walltime: true,
            resume_from: None,
        }
    }
}

/// Paths and summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
    pub best_val_dice: f64,
}

/// Per-epoch RNG stream, derived from the run seed so resuming at an epoch
/// boundary reproduces the uninterrupted run.
fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::params::param_seed(seed, &format!("epoch{epoch}")))
}

fn mean_foreground_dice(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for organ in 1..classes {
        total += dice_volumetric(pred, truth, organ as u8)?;
    }
    Ok(total / (classes - 1) as f64)
}

/// Run the epoch loop. Deterministic for a fixed seed in single-threaded
/// mode (and stronger: every kernel is worker-count independent).
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.spec.validate()?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("batch_size and epochs must be >= 1".to_string()));
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let manifest = read_manifest(&cfg.data_dir)?;
    let train_cases = load_cases(&cfg.data_dir, &manifest.train)?;
    let val_cases = load_cases(&cfg.data_dir, &manifest.val)?;
    if train_cases.is_empty() {
        return Err(Error::contract("manifest has no training cases".to_string()));
    }
    let extent = train_cases[0].slice_extent();
    for c in train_cases.iter().chain(&val_cases) {
        let (_, h, w) = c.dims();
        if h != extent || w != extent {
            return Err(Error::shape(format!(
                "case {}: slices are {h}x{w}, expected square {extent}x{extent}",
                c.id
            )));
        }
    }
    let spec = ModelSpec { input_extent: extent, ..cfg.spec.clone() };
    let model = Model::new(spec.clone())?;

    let (mut params, mut opt, start_epoch, mut best_val) = match &cfg.resume_from {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            if ckpt.spec != spec {
                return Err(Error::config(format!(
                    "checkpoint spec does not match run config:\n{}\nvs\n{}",
                    ckpt.spec.to_config_text(),
                    spec.to_config_text()
                )));
            }
            let opt = OptimState {
                momentum: ckpt.momentum,
                weight_decay: ckpt.weight_decay,
                velocity: ckpt.velocity,
            };
            (ckpt.params, opt, ckpt.epoch, ckpt.best_val_dice)
        }
        None => {
            let params = model.init_params::<f32>(cfg.seed)?;
            let opt = OptimState::new(&params, cfg.momentum, cfg.weight_decay)?;
            (params, opt, 0, f64::NEG_INFINITY)
        }
    };
    if start_epoch >= cfg.epochs {
        return Err(Error::config(format!(
            "checkpoint is already at epoch {start_epoch} of {}",
            cfg.epochs
        )));
    }

    // All (case, slice) pairs of the training split.
    let mut slots = Vec::new();
    for (ci, c) in train_cases.iter().enumerate() {
        for d in 0..c.dims().0 {
            slots.push((ci, d));
        }
    }

    let mut log = TrainLog::default();
    let last_path = cfg.out_dir.join("last.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");
    let log_path = cfg.out_dir.join("train_log.csv");

    for epoch in start_epoch..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cfg.schedule.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = slots.clone();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut image = Vec::with_capacity(b * extent * extent);
            let mut labels = Vec::with_capacity(b * extent * extent);
            for &(ci, d) in chunk {
                let case = &train_cases[ci];
                let (img, lbl) =
                    augment(case.image_slice(d), case.label_slice(d), extent, &mut rng, &cfg.augment)?;
                image.extend_from_slice(&normalize_slice(&img));
                labels.extend_from_slice(&lbl);
            }
            let mut g = Graph::<f32>::new();
            let nodes = params.register(&mut g);
            let input = g.constant(Tensor::from_vec(&[b, 1, extent, extent], image)?);
            let logits = model.forward(&mut g, &nodes, input)?;
            let loss =
                build_loss(&mut g, logits, &LabelBatch::new((b, extent, extent), labels)?)?;
            let loss_value = g.value(loss.total).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {loss_value} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss_value;
            batches += 1;
            let grads = g.backward(loss.total)?;
            sgd_step(&mut params, &grads, &mut opt, lr)?;
        }

        let val_dice = if val_cases.is_empty() {
            f64::NAN
        } else {
            let mut total = 0.0;
            for case in &val_cases {
                let pred = predict_volume(&model, &params, case, cfg.batch_size)?;
                total += mean_foreground_dice(&pred, &case.labels, spec.classes)?;
            }
            total / val_cases.len() as f64
        };

        let wall = if cfg.log_walltime { epoch_start.elapsed().as_secs_f64() } else { 0.0 };
        log.rows.push(TrainLogRow {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_dice,
            wall_secs: wall,
        });

        let ckpt = Checkpoint {
            spec: spec.clone(),
            epoch: epoch + 1,
            seed: cfg.seed,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            best_val_dice: best_val.max(val_dice),
            params: params.clone(),
            velocity: opt.velocity.clone(),
        };
        if val_dice > best_val || best_val.is_infinite() {
            best_val = val_dice;
            ckpt.write(&best_path)?;
        }
        if (epoch + 1 - start_epoch) % cfg.checkpoint_every.max(1) == 0 || epoch + 1 == cfg.epochs {
            ckpt.write(&last_path)?;
        }
    }

    std::fs::write(&log_path, log.to_csv())
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    Ok(TrainOutcome {
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        log_path,
        log,
        best_val_dice: best_val,
    })
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Predict a whole case by stacking per-slice argmax outputs into a volume.
pub fn predict_volume(
    model: &Model,
    params: &ParameterSet<f32>,
    case: &Case,
    batch_size: usize,
) -> Result<LabelVolume> {
    let (nd, nh, nw) = case.dims();
    let mut voxels = vec![0u8; nd * nh * nw];
    let plane = nh * nw;
    let slices: Vec<usize> = (0..nd).collect();
    for chunk in slices.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let mut image = Vec::with_capacity(b * plane);
        for &d in chunk {
            image.extend_from_slice(&normalize_slice(case.image_slice(d)));
        }
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let input = g.constant(Tensor::from_vec(&[b, 1, nh, nw], image)?);
        let logits = model.forward(&mut g, &nodes, input)?;
        let v = g.value(logits);
        let k = v.shape()[1];
        for (bi, &d) in chunk.iter().enumerate() {
            for p in 0..plane {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for c in 0..k {
                    let x = v.data()[(bi * k + c) * plane + p];
                    if x > best_v {
                        best_v = x;
                        best = c;
                    }
                }
                voxels[d * plane + p] = best as u8;
            }
        }
    }
    LabelVolume::new(case.dims(), case.labels.spacing, voxels)
}

/// Organ display names: the pelvic set when the class count matches, generic
/// class names otherwise.
pub fn organ_names(classes: usize) -> Vec<String> {
    if classes == ORGANS.len() + 1 {
        ORGANS.iter().map(|s| s.to_string()).collect()
    } else {
        (1..classes).map(|c| format!("class_{c}")).collect()
    }
}

/// Evaluate a checkpoint on one split of a dataset. Returns the aggregated
/// report plus the per-case metrics (for t-tests against a baseline).
pub fn evaluate(
    ckpt: &Checkpoint,
    data_dir: &Path,
    split: &[String],
    batch_size: usize,
) -> Result<(MetricReport, Vec<CaseMetrics>)> {
    if split.is_empty() {
        return Err(Error::contract("evaluation split is empty".to_string()));
    }
    let cases = load_cases(data_dir, split)?;
    let model = Model::new(ckpt.spec.clone())?;
    let classes = ckpt.spec.classes;
    let mut per_case = Vec::with_capacity(cases.len());
    for case in &cases {
        let pred = predict_volume(&model, &ckpt.params, case, batch_size)?;
        let mut dice = Vec::with_capacity(classes - 1);
        let mut msds = Vec::with_capacity(classes - 1);
        for organ in 1..classes {
            dice.push(dice_volumetric(&pred, &case.labels, organ as u8)?);
            msds.push(msd(&pred, &case.labels, organ as u8)?);
        }
        per_case.push(CaseMetrics { case_id: case.id.clone(), dice, msd: msds });
    }
    let report = aggregate_report(&per_case, &organ_names(classes))?;
    Ok((report, per_case))
}
