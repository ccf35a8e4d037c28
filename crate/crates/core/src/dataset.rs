//! On-disk phantom datasets: generation, layout and loading.
//!
//! A dataset directory holds `manifest.txt` plus one image/label SegVol pair
//! per case: `<case_id>_img.svol` and `<case_id>_lbl.svol`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::segvol::{SegVol, SplitManifest, VolumeData};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// One loaded case.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Vec<f32>,
    pub labels: LabelVolume,
}

impl Case {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dims
    }

    pub fn slice_extent(&self) -> usize {
        self.labels.dims.1
    }

    pub fn image_slice(&self, d: usize) -> &[f32] {
        let plane = self.labels.dims.1 * self.labels.dims.2;
        &self.image[d * plane..(d + 1) * plane]
    }

    pub fn label_slice(&self, d: usize) -> &[u8] {
        let plane = self.labels.dims.1 * self.labels.dims.2;
        &self.labels.voxels[d * plane..(d + 1) * plane]
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_img.svol"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_lbl.svol"))
}

/// Generate `cases` phantoms under `dir` and write the split manifest.
/// Per-case seeds derive from `seed`, so the dataset is byte-reproducible.
pub fn generate_dataset(
    dir: &Path,
    cases: usize,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    if cases == 0 {
        return Err(Error::config("cases must be >= 1".to_string()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let spacing_f32 = (spacing.0 as f32, spacing.1 as f32, spacing.2 as f32);
    let mut ids = Vec::with_capacity(cases);
    for i in 0..cases {
        let id = format!("case_{i:03}");
        let spec = PhantomSpec {
            seed: crate::params::param_seed(seed, &id),
            dims,
            spacing,
        };
        let (image, labels) = generate_phantom(&spec)?;
        SegVol::new(dims, spacing_f32, VolumeData::F32(image))?.write(&image_path(dir, &id))?;
        SegVol::new(dims, spacing_f32, VolumeData::U8(labels.voxels))?
            .write(&label_path(dir, &id))?;
        ids.push(id);
    }
    let manifest = SplitManifest::split(&ids, seed)?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SplitManifest> {
    SplitManifest::read(&dir.join(MANIFEST_FILE))
}

/// Load the listed cases; every missing or mismatched file is reported in one
/// error.
pub fn load_cases(dir: &Path, ids: &[String]) -> Result<Vec<Case>> {
    let mut missing = Vec::new();
    for id in ids {
        for p in [image_path(dir, id), label_path(dir, id)] {
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::contract(format!("missing case files: {}", missing.join(", "))));
    }
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let img = SegVol::read(&image_path(dir, id))?;
        let lbl = SegVol::read(&label_path(dir, id))?;
        if img.dims != lbl.dims {
            return Err(Error::shape(format!(
                "case {id}: image dims {:?} != label dims {:?}",
                img.dims, lbl.dims
            )));
        }
        cases.push(Case {
            id: id.clone(),
            image: img.as_image()?.to_vec(),
            labels: lbl.to_label_volume()?,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_dataset(dir.path(), 4, (16, 16, 16), (3.0, 1.0, 1.0), 9).unwrap();
        assert_eq!(manifest.all_ids().len(), 4);
        let cases = load_cases(dir.path(), &manifest.all_ids()).unwrap();
        assert_eq!(cases.len(), 4);
        assert_eq!(cases[0].dims(), (16, 16, 16));
        let again = read_manifest(dir.path()).unwrap();
        assert_eq!(again, manifest);
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 2, (16, 16, 16), (1.0, 1.0, 1.0), 1).unwrap();
        std::fs::remove_file(label_path(dir.path(), "case_001")).unwrap();
        let err =
            load_cases(dir.path(), &["case_000".into(), "case_001".into()]).unwrap_err();
        assert!(err.to_string().contains("case_001_lbl.svol"), "{err}");
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(d1.path(), 2, (16, 16, 16), (1.0, 1.0, 1.0), 5).unwrap();
        generate_dataset(d2.path(), 2, (16, 16, 16), (1.0, 1.0, 1.0), 5).unwrap();
        for name in ["case_000_img.svol", "case_001_lbl.svol", MANIFEST_FILE] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
}
