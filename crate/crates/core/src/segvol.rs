//! SegVol: a bit-exact binary container for one volume, plus the plain-text
//! split manifest.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SVOL"
//! 4       2     version (u16), currently 1
//! 6       12    dims d, h, w (3 x u32)
//! 18      12    spacing mm per voxel along d, h, w (3 x f32)
//! 30      1     dtype code: 0 = f32 image, 1 = u8 labels
//! 31      ...   payload, row-major, d*h*w elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;

const MAGIC: &[u8; 4] = b"SVOL";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 31;

/// Payload of a [`SegVol`].
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            VolumeData::F32(_) => 0,
            VolumeData::U8(_) => 1,
        }
    }
}

/// One volume with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct SegVol {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: VolumeData,
}

impl SegVol {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: VolumeData) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(Error::shape(format!(
                "segvol: payload of {} elements does not fill dims {dims:?} ({n})",
                data.len()
            )));
        }
        Ok(SegVol { dims, spacing, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.dims.0, self.dims.1, self.dims.2] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in [self.spacing.0, self.spacing.1, self.spacing.2] {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.data.dtype_code());
        match &self.data {
            VolumeData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            VolumeData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}, expected \"SVOL\"", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = (u32_at(6), u32_at(10), u32_at(14));
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(fail(6, format!("zero extent in dims {dims:?}")));
        }
        let spacing = (f32_at(18), f32_at(22), f32_at(26));
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(fail(18, format!("non-positive spacing {spacing:?}")));
        }
        let dtype = bytes[30];
        let n = dims.0 * dims.1 * dims.2;
        let payload = &bytes[HEADER_LEN..];
        let data = match dtype {
            0 => {
                if payload.len() != n * 4 {
                    return Err(fail(
                        HEADER_LEN,
                        format!("payload is {} bytes, expected {} (f32 x {n})", payload.len(), n * 4),
                    ));
                }
                VolumeData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                if payload.len() != n {
                    return Err(fail(
                        HEADER_LEN,
                        format!("payload is {} bytes, expected {n} (u8)", payload.len()),
                    ));
                }
                VolumeData::U8(payload.to_vec())
            }
            other => return Err(fail(30, format!("unknown dtype code {other}"))),
        };
        Ok(SegVol { dims, spacing, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Interpret a u8 volume as labels.
    pub fn to_label_volume(&self) -> Result<LabelVolume> {
        match &self.data {
            VolumeData::U8(v) => LabelVolume::new(
                self.dims,
                (self.spacing.0 as f64, self.spacing.1 as f64, self.spacing.2 as f64),
                v.clone(),
            ),
            VolumeData::F32(_) => {
                Err(Error::contract("segvol holds f32 image data, not labels".to_string()))
            }
        }
    }

    pub fn as_image(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::F32(v) => Ok(v),
            VolumeData::U8(_) => {
                Err(Error::contract("segvol holds u8 label data, not an image".to_string()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Split manifest
// ---------------------------------------------------------------------------

/// Train/val/test membership of every case id. Serialized as one
/// `split,case_id` line per case.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Partition `case_ids` into train/val/test at 66/11/23 %, shuffled by
    /// `seed`. Proportions land within one case of the targets.
    pub fn split(case_ids: &[String], seed: u64) -> Result<SplitManifest> {
        if case_ids.is_empty() {
            return Err(Error::contract("cannot split zero cases".to_string()));
        }
        let mut ids = case_ids.to_vec();
        {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
        }
        let n = ids.len();
        let n_train = ((n as f64) * 0.66).round() as usize;
        let n_val = (((n as f64) * 0.11).round() as usize).max(if n >= 3 { 1 } else { 0 });
        let n_train = n_train.min(n.saturating_sub(n_val));
        let train = ids[..n_train].to_vec();
        let val = ids[n_train..n_train + n_val].to_vec();
        let test = ids[n_train + n_val..].to_vec();
        Ok(SplitManifest { train, val, test })
    }

    pub fn all_ids(&self) -> Vec<String> {
        let mut ids = self.train.clone();
        ids.extend_from_slice(&self.val);
        ids.extend_from_slice(&self.test);
        ids
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                out.push_str(&format!("{name},{id}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<SplitManifest> {
        let mut manifest = SplitManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, id) = line.split_once(',').ok_or_else(|| {
                Error::config(format!("manifest line {}: expected split,case_id", lineno + 1))
            })?;
            match split.trim() {
                "train" => manifest.train.push(id.trim().to_string()),
                "val" => manifest.val.push(id.trim().to_string()),
                "test" => manifest.test.push(id.trim().to_string()),
                other => {
                    return Err(Error::config(format!(
                        "manifest line {}: unknown split {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<SplitManifest> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_identical() {
        let data: Vec<f32> = (0..24).map(|i| (i as f32).sin() * 1e-3 + i as f32).collect();
        let v = SegVol::new((2, 3, 4), (3.0, 1.0, 1.5), VolumeData::F32(data)).unwrap();
        let bytes = v.to_bytes();
        let back = SegVol::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn u8_round_trip() {
        let v = SegVol::new((2, 2, 2), (1.0, 1.0, 1.0), VolumeData::U8(vec![0, 1, 2, 3, 4, 5, 0, 1]))
            .unwrap();
        assert_eq!(SegVol::from_bytes(&v.to_bytes()).unwrap(), v);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = SegVol::new((1, 1, 1), (1.0, 1.0, 1.0), VolumeData::U8(vec![0]))
            .unwrap()
            .to_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        match SegVol::from_bytes(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected bad-magic format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        // Header declares 4x4x4 u8 labels but only 63 payload bytes follow.
        let v = SegVol::new((4, 4, 4), (1.0, 1.0, 1.0), VolumeData::U8(vec![1; 64])).unwrap();
        let mut bytes = v.to_bytes();
        bytes.pop();
        match SegVol::from_bytes(&bytes) {
            Err(Error::Format { offset: 31, message }) => {
                assert!(message.contains("63"), "{message}")
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_rejected() {
        let mut bytes = SegVol::new((1, 1, 1), (1.0, 1.0, 1.0), VolumeData::U8(vec![0]))
            .unwrap()
            .to_bytes();
        bytes[30] = 7;
        match SegVol::from_bytes(&bytes) {
            Err(Error::Format { offset: 30, .. }) => {}
            other => panic!("expected dtype error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.svol");
        let v = SegVol::new((2, 2, 2), (2.0, 1.0, 1.0), VolumeData::F32(vec![0.5; 8])).unwrap();
        v.write(&path).unwrap();
        assert_eq!(SegVol::read(&path).unwrap(), v);
    }

    #[test]
    fn split_partitions_without_duplicates() {
        let ids: Vec<String> = (0..12).map(|i| format!("case_{i:03}")).collect();
        let m = SplitManifest::split(&ids, 7).unwrap();
        assert_eq!(m.train.len(), 8);
        assert_eq!(m.val.len(), 1);
        assert_eq!(m.test.len(), 3);
        let mut all = m.all_ids();
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_proportions_within_one_case() {
        for n in [9usize, 20, 55, 83] {
            let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let m = SplitManifest::split(&ids, 3).unwrap();
            let target_train = 0.66 * n as f64;
            let target_val = 0.11 * n as f64;
            assert!((m.train.len() as f64 - target_train).abs() <= 1.0, "n={n}");
            assert!((m.val.len() as f64 - target_val).abs() <= 1.0, "n={n}");
            assert_eq!(m.train.len() + m.val.len() + m.test.len(), n);
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let ids: Vec<String> = (0..10).map(|i| format!("case_{i:03}")).collect();
        let m = SplitManifest::split(&ids, 1).unwrap();
        let back = SplitManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_rejects_unknown_split() {
        assert!(SplitManifest::from_text("holdout,case_1\n").is_err());
    }
}
