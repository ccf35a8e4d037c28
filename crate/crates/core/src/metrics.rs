//! Volumetric segmentation metrics: Dice coefficient, surface extraction,
//! mean surface distance in millimetres, per-organ aggregation and the paired
//! t-test used to compare two runs.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Organ names in report order, ids 1..=5 (0 is background).
pub const ORGANS: [&str; 5] =
    ["anal_canal", "bladder", "rectum", "femoral_head_left", "femoral_head_right"];

/// 3-D integer-labeled voxel grid with physical spacing. Axis order is
/// (depth, height, width), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    /// Millimetres per voxel along (d, h, w).
    pub spacing: (f64, f64, f64),
    pub voxels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        voxels: Vec<u8>,
    ) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if voxels.len() != n {
            return Err(Error::shape(format!(
                "label volume: {} voxels do not fill dims {dims:?} ({n})",
                voxels.len()
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::config(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(LabelVolume { dims, spacing, voxels })
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> u8 {
        self.voxels[(d * self.dims.1 + h) * self.dims.2 + w]
    }

    fn check_same_dims(&self, other: &LabelVolume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "volumes have different dims: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Volumetric Dice for one organ id: `2|A∩B| / (|A| + |B|)` over the
/// binarized masks. Both-empty pairs score 1.0 (perfect agreement on
/// absence), one-empty pairs score 0.0.
pub fn dice_volumetric(pred: &LabelVolume, truth: &LabelVolume, organ: u8) -> Result<f64> {
    pred.check_same_dims(truth)?;
    let mut a = 0u64;
    let mut b = 0u64;
    let mut inter = 0u64;
    for (&p, &t) in pred.voxels.iter().zip(&truth.voxels) {
        let pa = p == organ;
        let tb = t == organ;
        a += pa as u64;
        b += tb as u64;
        inter += (pa && tb) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Surface points of one organ in physical millimetres. A foreground voxel is
/// a surface point iff at least one of its six axis neighbors is background
/// or outside the volume.
pub fn extract_surface(vol: &LabelVolume, organ: u8) -> Vec<[f64; 3]> {
    let (nd, nh, nw) = vol.dims;
    let (sd, sh, sw) = vol.spacing;
    let mut points = Vec::new();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                if vol.at(d, h, w) != organ {
                    continue;
                }
                let fg = |dd: isize, hh: isize, ww: isize| -> bool {
                    if dd < 0 || hh < 0 || ww < 0 {
                        return false;
                    }
                    let (dd, hh, ww) = (dd as usize, hh as usize, ww as usize);
                    dd < nd && hh < nh && ww < nw && vol.at(dd, hh, ww) == organ
                };
                let (di, hi, wi) = (d as isize, h as isize, w as isize);
                let interior = fg(di - 1, hi, wi)
                    && fg(di + 1, hi, wi)
                    && fg(di, hi - 1, wi)
                    && fg(di, hi + 1, wi)
                    && fg(di, hi, wi - 1)
                    && fg(di, hi, wi + 1);
                if !interior {
                    points.push([d as f64 * sd, h as f64 * sh, w as f64 * sw]);
                }
            }
        }
    }
    points
}

/// Mean surface distance outcome; surfaces can be empty, in which case the
/// distance is undefined and excluded from aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MsdResult {
    Millimetres(f64),
    Undefined,
}

impl MsdResult {
    pub fn value(&self) -> Option<f64> {
        match self {
            MsdResult::Millimetres(v) => Some(*v),
            MsdResult::Undefined => None,
        }
    }
}

fn min_distance(p: [f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter()
        .map(|q| {
            let d0 = p[0] - q[0];
            let d1 = p[1] - q[1];
            let d2 = p[2] - q[2];
            (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric mean surface distance in millimetres:
/// `(sum_a d(a, S(B)) + sum_b d(b, S(A))) / (|S(A)| + |S(B)|)`.
pub fn msd(pred: &LabelVolume, truth: &LabelVolume, organ: u8) -> Result<MsdResult> {
    pred.check_same_dims(truth)?;
    if pred.spacing != truth.spacing {
        return Err(Error::contract(format!(
            "volumes have different spacing: {:?} vs {:?}",
            pred.spacing, truth.spacing
        )));
    }
    let sa = extract_surface(pred, organ);
    let sb = extract_surface(truth, organ);
    if sa.is_empty() || sb.is_empty() {
        return Ok(MsdResult::Undefined);
    }
    let mins_a: Vec<f64> = sa.par_iter().map(|&p| min_distance(p, &sb)).collect();
    let mins_b: Vec<f64> = sb.par_iter().map(|&p| min_distance(p, &sa)).collect();
    let total: f64 = mins_a.iter().sum::<f64>() + mins_b.iter().sum::<f64>();
    Ok(MsdResult::Millimetres(total / (sa.len() + sb.len()) as f64))
}

/// Two-sided paired t-test. Returns `(t, p)`.
///
/// Degenerate inputs follow the conventions: all-zero differences give
/// `(0, 1)`; nonzero constant differences give `(±inf, 0)`.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::contract(format!(
            "paired t-test: {} vs {} samples",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::contract("paired t-test needs at least 2 pairs".to_string()));
    }
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss: f64 = d.iter().map(|v| (v - mean).powi(2)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok((0.0, 1.0));
        }
        return Ok((mean.signum() * f64::INFINITY, 0.0));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, (n - 1) as f64);
    Ok((t, p))
}

fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Per-case metric bundle, one Dice and one MSD slot per organ.
#[derive(Debug, Clone)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: Vec<f64>,
    pub msd: Vec<MsdResult>,
}

/// One aggregated report row.
#[derive(Debug, Clone)]
pub struct OrganRow {
    pub organ: String,
    pub dice_mean: f64,
    pub dice_sd: f64,
    /// None when every case had an undefined surface distance.
    pub msd_mean: Option<f64>,
    pub msd_sd: Option<f64>,
    /// Cases excluded from the MSD mean because a surface was empty.
    pub msd_undefined: usize,
    pub t_dice: Option<f64>,
    pub p_dice: Option<f64>,
}

/// Aggregated per-organ metrics; rows follow [`ORGANS`] order.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub organs: Vec<String>,
    pub cases: usize,
    pub rows: Vec<OrganRow>,
}

fn mean_and_population_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate per-case metrics into per-organ means and population SDs.
pub fn aggregate_report(cases: &[CaseMetrics], organs: &[String]) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::contract("aggregate_report: no cases".to_string()));
    }
    for c in cases {
        if c.dice.len() != organs.len() || c.msd.len() != organs.len() {
            return Err(Error::contract(format!(
                "case {}: expected {} organ entries",
                c.case_id,
                organs.len()
            )));
        }
    }
    let mut rows = Vec::with_capacity(organs.len());
    for (oi, organ) in organs.iter().enumerate() {
        let dice: Vec<f64> = cases.iter().map(|c| c.dice[oi]).collect();
        let (dice_mean, dice_sd) = mean_and_population_sd(&dice);
        let msd_vals: Vec<f64> = cases.iter().filter_map(|c| c.msd[oi].value()).collect();
        let msd_undefined = cases.len() - msd_vals.len();
        let (msd_mean, msd_sd) = if msd_vals.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_and_population_sd(&msd_vals);
            (Some(m), Some(s))
        };
        rows.push(OrganRow {
            organ: organ.clone(),
            dice_mean,
            dice_sd,
            msd_mean,
            msd_sd,
            msd_undefined,
            t_dice: None,
            p_dice: None,
        });
    }
    Ok(MetricReport { organs: organs.to_vec(), cases: cases.len(), rows })
}

impl MetricReport {
    /// Fill the per-organ t/p columns from a paired t-test of per-case Dice
    /// scores against a baseline run over the same cases.
    pub fn attach_t_tests(&mut self, own: &[CaseMetrics], baseline: &[CaseMetrics]) -> Result<()> {
        if own.len() != baseline.len() {
            return Err(Error::contract(format!(
                "t-test: {} cases vs {} baseline cases",
                own.len(),
                baseline.len()
            )));
        }
        for (oi, row) in self.rows.iter_mut().enumerate() {
            let xs: Vec<f64> = own.iter().map(|c| c.dice[oi]).collect();
            let ys: Vec<f64> = baseline.iter().map(|c| c.dice[oi]).collect();
            let (t, p) = paired_t_test(&xs, &ys)?;
            row.t_dice = Some(t);
            row.p_dice = Some(p);
        }
        Ok(())
    }

    /// Mean of the per-organ Dice means (the "Average" column convention).
    pub fn average_dice(&self) -> f64 {
        self.rows.iter().map(|r| r.dice_mean).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean of the defined per-organ MSD means.
    pub fn average_msd(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.msd_mean).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// CSV rendering: header, one row per organ, then an average row.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6}"),
            None => "undefined".to_string(),
        };
        let mut out = String::from(
            "organ,dice_mean,dice_sd,msd_mean_mm,msd_sd_mm,msd_undefined,t_dice,p_dice\n",
        );
        for r in &self.rows {
            let t = r.t_dice.map(|v| format!("{v:.6}")).unwrap_or_default();
            let p = r.p_dice.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{},{},{}\n",
                r.organ,
                r.dice_mean,
                r.dice_sd,
                fmt_opt(r.msd_mean),
                fmt_opt(r.msd_sd),
                r.msd_undefined,
                t,
                p
            ));
        }
        out.push_str(&format!(
            "average,{:.6},,{},,,,\n",
            self.average_dice(),
            fmt_opt(self.average_msd())
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vol(dims: (usize, usize, usize), voxels: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, (1.0, 1.0, 1.0), voxels).unwrap()
    }

    fn rand_vol(seed: u64, classes: u8) -> LabelVolume {
        // Deterministic pseudo-random labels over a 16^3 grid.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let mut voxels = Vec::with_capacity(16 * 16 * 16);
        for _ in 0..16 * 16 * 16 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            voxels.push((state % classes as u64) as u8);
        }
        vol((16, 16, 16), voxels)
    }

    #[test]
    fn dice_of_identical_nonempty_masks_is_one() {
        let v = rand_vol(1, 3);
        assert_eq!(dice_volumetric(&v, &v, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_of_disjoint_masks_is_zero() {
        let a = vol((1, 1, 4), vec![1, 1, 0, 0]);
        let b = vol((1, 1, 4), vec![0, 0, 1, 1]);
        assert_eq!(dice_volumetric(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_counts_match_hand_example() {
        // |A| = 4, |B| = 6, |A ∩ B| = 3 -> 2*3/10 = 0.6
        let mut a = vec![0u8; 27];
        let mut b = vec![0u8; 27];
        for v in a.iter_mut().take(4) {
            *v = 1;
        }
        for v in b.iter_mut().take(7).skip(1) {
            *v = 1;
        }
        let a = vol((3, 3, 3), a);
        let b = vol((3, 3, 3), b);
        assert_relative_eq!(dice_volumetric(&a, &b, 1).unwrap(), 0.6);
    }

    #[test]
    fn dice_empty_conventions() {
        let empty = vol((2, 2, 2), vec![0; 8]);
        let full = vol((2, 2, 2), vec![1; 8]);
        assert_eq!(dice_volumetric(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice_volumetric(&empty, &full, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_dims_mismatch_is_error() {
        let a = vol((2, 2, 2), vec![0; 8]);
        let b = vol((2, 2, 4), vec![0; 16]);
        assert!(dice_volumetric(&a, &b, 1).is_err());
    }

    /// Independent oracle: set-based Dice over coordinate sets.
    fn dice_oracle(a: &LabelVolume, b: &LabelVolume, organ: u8) -> f64 {
        use std::collections::HashSet;
        let coords = |v: &LabelVolume| -> HashSet<(usize, usize, usize)> {
            let mut s = HashSet::new();
            for d in 0..v.dims.0 {
                for h in 0..v.dims.1 {
                    for w in 0..v.dims.2 {
                        if v.at(d, h, w) == organ {
                            s.insert((d, h, w));
                        }
                    }
                }
            }
            s
        };
        let sa = coords(a);
        let sb = coords(b);
        if sa.is_empty() && sb.is_empty() {
            return 1.0;
        }
        2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
    }

    #[test]
    fn dice_matches_oracle_on_random_volumes() {
        for seed in 0..20 {
            let a = rand_vol(seed, 4);
            let b = rand_vol(seed + 1000, 4);
            for organ in 1..4u8 {
                assert_eq!(
                    dice_volumetric(&a, &b, organ).unwrap(),
                    dice_oracle(&a, &b, organ),
                    "seed {seed} organ {organ}"
                );
            }
        }
    }

    #[test]
    fn dice_is_symmetric() {
        for seed in 0..10 {
            let a = rand_vol(seed, 3);
            let b = rand_vol(seed + 77, 3);
            assert_eq!(dice_volumetric(&a, &b, 1).unwrap(), dice_volumetric(&b, &a, 1).unwrap());
        }
    }

    #[test]
    fn single_voxel_is_its_own_surface() {
        let mut voxels = vec![0u8; 27];
        voxels[13] = 1; // center of a 3x3x3 grid
        let v = vol((3, 3, 3), voxels);
        assert_eq!(extract_surface(&v, 1), vec![[1.0, 1.0, 1.0]]);
    }

    #[test]
    fn solid_cube_surface_excludes_the_center() {
        let v = vol((3, 3, 3), vec![1; 27]);
        let surface = extract_surface(&v, 1);
        assert_eq!(surface.len(), 26);
        assert!(!surface.contains(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn empty_mask_has_empty_surface() {
        let v = vol((3, 3, 3), vec![0; 27]);
        assert!(extract_surface(&v, 1).is_empty());
    }

    #[test]
    fn surface_is_foreground_and_covers_boundary() {
        let v = rand_vol(5, 2);
        let surface = extract_surface(&v, 1);
        for p in &surface {
            assert_eq!(v.at(p[0] as usize, p[1] as usize, p[2] as usize), 1);
        }
        // Every foreground voxel with a background 6-neighbor must be present.
        for d in 0..16usize {
            for h in 0..16usize {
                for w in 0..16usize {
                    if v.at(d, h, w) != 1 {
                        continue;
                    }
                    let on_boundary = [
                        (d.wrapping_sub(1), h, w),
                        (d + 1, h, w),
                        (d, h.wrapping_sub(1), w),
                        (d, h + 1, w),
                        (d, h, w.wrapping_sub(1)),
                        (d, h, w + 1),
                    ]
                    .iter()
                    .any(|&(dd, hh, ww)| dd >= 16 || hh >= 16 || ww >= 16 || v.at(dd, hh, ww) != 1);
                    if on_boundary {
                        assert!(surface.contains(&[d as f64, h as f64, w as f64]));
                    }
                }
            }
        }
    }

    #[test]
    fn msd_of_identical_volumes_is_zero() {
        let v = rand_vol(9, 2);
        assert_eq!(msd(&v, &v, 1).unwrap(), MsdResult::Millimetres(0.0));
    }

    #[test]
    fn msd_two_point_example() {
        let mut a = vec![0u8; 4];
        let mut b = vec![0u8; 4];
        a[0] = 1; // (0,0,0)
        b[3] = 1; // (3,0,0)
        let va = vol((4, 1, 1), a.clone());
        let vb = vol((4, 1, 1), b.clone());
        assert_eq!(msd(&va, &vb, 1).unwrap(), MsdResult::Millimetres(3.0));

        // Same points with spacing 2 along the displaced axis: 6 mm.
        let va2 = LabelVolume::new((4, 1, 1), (2.0, 1.0, 1.0), a).unwrap();
        let vb2 = LabelVolume::new((4, 1, 1), (2.0, 1.0, 1.0), b).unwrap();
        assert_eq!(msd(&va2, &vb2, 1).unwrap(), MsdResult::Millimetres(6.0));
    }

    #[test]
    fn msd_empty_surface_is_undefined() {
        let empty = vol((2, 2, 2), vec![0; 8]);
        let full = vol((2, 2, 2), vec![1; 8]);
        assert_eq!(msd(&empty, &full, 1).unwrap(), MsdResult::Undefined);
    }

    /// Exhaustive pairwise-distance oracle, coded independently.
    fn msd_oracle(a: &LabelVolume, b: &LabelVolume, organ: u8) -> Option<f64> {
        let surf = |v: &LabelVolume| -> Vec<(f64, f64, f64)> {
            let mut pts = Vec::new();
            for d in 0..v.dims.0 as isize {
                for h in 0..v.dims.1 as isize {
                    for w in 0..v.dims.2 as isize {
                        if v.at(d as usize, h as usize, w as usize) != organ {
                            continue;
                        }
                        let mut boundary = false;
                        for (dd, hh, ww) in [
                            (d - 1, h, w),
                            (d + 1, h, w),
                            (d, h - 1, w),
                            (d, h + 1, w),
                            (d, h, w - 1),
                            (d, h, w + 1),
                        ] {
                            if dd < 0
                                || hh < 0
                                || ww < 0
                                || dd >= v.dims.0 as isize
                                || hh >= v.dims.1 as isize
                                || ww >= v.dims.2 as isize
                                || v.at(dd as usize, hh as usize, ww as usize) != organ
                            {
                                boundary = true;
                            }
                        }
                        if boundary {
                            pts.push((
                                d as f64 * v.spacing.0,
                                h as f64 * v.spacing.1,
                                w as f64 * v.spacing.2,
                            ));
                        }
                    }
                }
            }
            pts
        };
        let sa = surf(a);
        let sb = surf(b);
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let dist = |p: (f64, f64, f64), q: (f64, f64, f64)| {
            ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) + (p.2 - q.2).powi(2)).sqrt()
        };
        let mut total = 0.0;
        for &p in &sa {
            total += sb.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
        }
        for &q in &sb {
            total += sa.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min);
        }
        Some(total / (sa.len() + sb.len()) as f64)
    }

    #[test]
    fn msd_matches_oracle_on_random_volumes() {
        for seed in 0..10 {
            let mut a = rand_vol(seed, 5);
            let mut b = rand_vol(seed + 31, 5);
            a.spacing = (1.5, 1.0, 2.0);
            b.spacing = (1.5, 1.0, 2.0);
            let got = msd(&a, &b, 2).unwrap();
            match msd_oracle(&a, &b, 2) {
                Some(expect) => assert_relative_eq!(got.value().unwrap(), expect, epsilon = 1e-6),
                None => assert_eq!(got, MsdResult::Undefined),
            }
        }
    }

    #[test]
    fn msd_scales_linearly_with_spacing() {
        let a = rand_vol(3, 2);
        let b = rand_vol(44, 2);
        let base = msd(&a, &b, 1).unwrap().value().unwrap();
        let s = 2.5;
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.spacing = (s, s, s);
        b2.spacing = (s, s, s);
        let scaled = msd(&a2, &b2, 1).unwrap().value().unwrap();
        assert_relative_eq!(scaled, s * base, epsilon = 1e-6);
    }

    #[test]
    fn msd_is_symmetric() {
        let a = rand_vol(8, 2);
        let b = rand_vol(80, 2);
        assert_eq!(msd(&a, &b, 1).unwrap(), msd(&b, &a, 1).unwrap());
    }

    #[test]
    fn t_test_zero_difference() {
        let xs = [0.8, 0.9, 0.7, 0.85];
        let (t, p) = paired_t_test(&xs, &xs).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
    }

    #[test]
    fn t_test_constant_nonzero_difference_is_degenerate() {
        let xs = [2.0, 3.0, 4.0, 5.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        let (t, p) = paired_t_test(&xs, &ys).unwrap();
        assert!(t.is_infinite() && t > 0.0);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn t_test_matches_textbook_formula() {
        // d = [1, -1, 2, 0, 3]: mean 1, sample sd sqrt(2.5),
        // t = 1 / (sqrt(2.5)/sqrt(5)) = sqrt(2).
        let xs = [1.0, -1.0, 2.0, 0.0, 3.0];
        let ys = [0.0; 5];
        let (t, _p) = paired_t_test(&xs, &ys).unwrap();
        assert_relative_eq!(t, 2.0f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn t_test_contract_errors() {
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn organ_names() -> Vec<String> {
        ORGANS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_case_has_zero_sd() {
        let case = CaseMetrics {
            case_id: "c0".into(),
            dice: vec![0.9; 5],
            msd: vec![MsdResult::Millimetres(1.0); 5],
        };
        let report = aggregate_report(&[case], &organ_names()).unwrap();
        assert_eq!(report.rows[0].dice_sd, 0.0);
        assert_eq!(report.rows[0].msd_sd, Some(0.0));
    }

    #[test]
    fn population_sd_example() {
        // {0.8, 1.0} -> mean 0.9, population SD 0.1.
        let mk = |v: f64| CaseMetrics {
            case_id: format!("c{v}"),
            dice: vec![v; 5],
            msd: vec![MsdResult::Undefined; 5],
        };
        let report = aggregate_report(&[mk(0.8), mk(1.0)], &organ_names()).unwrap();
        assert_relative_eq!(report.rows[0].dice_mean, 0.9);
        assert_relative_eq!(report.rows[0].dice_sd, 0.1, epsilon = 1e-12);
        assert_eq!(report.rows[0].msd_mean, None);
        assert_eq!(report.rows[0].msd_undefined, 2);
    }

    #[test]
    fn csv_rows_follow_organ_order() {
        let case = CaseMetrics {
            case_id: "c0".into(),
            dice: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            msd: vec![MsdResult::Millimetres(1.0); 5],
        };
        let report = aggregate_report(&[case.clone(), case], &organ_names()).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7, "header + 5 organs + average");
        for (i, organ) in ORGANS.iter().enumerate() {
            assert!(lines[i + 1].starts_with(organ), "{}", lines[i + 1]);
        }
        assert!(lines[6].starts_with("average,0.3"));
    }

    #[test]
    fn identical_runs_compare_with_t_zero_p_one() {
        let case = |id: &str, d: f64| CaseMetrics {
            case_id: id.into(),
            dice: vec![d, d + 0.01, d + 0.02, d - 0.01, d],
            msd: vec![MsdResult::Millimetres(1.0); 5],
        };
        let cases = vec![case("a", 0.8), case("b", 0.85), case("c", 0.9)];
        let mut report = aggregate_report(&cases, &organ_names()).unwrap();
        report.attach_t_tests(&cases, &cases).unwrap();
        for row in &report.rows {
            assert_eq!(row.t_dice, Some(0.0));
            assert_eq!(row.p_dice, Some(1.0));
        }
    }
}
