//! Spatial resampling: bilinear upsampling, block-mean pooling and
//! normalized-coordinate bilinear sampling.
//!
//! Two coordinate conventions coexist deliberately:
//! - `upsample_bilinear` uses half-pixel (align-corners=false) source mapping,
//! - `sample_bilinear_normalized` maps -1 to the first pixel center and +1 to
//!   the last (align-corners=true), which is what the clamped flow warp needs.
//!
//! All interpolation arithmetic runs in f64 regardless of the tensor dtype.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Bilinear upsampling by an integer factor (half-pixel convention).
    pub fn upsample_bilinear(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::config("upsample factor must be >= 1".to_string()));
        }
        let v = self.value(input);
        let (b, c, h, w) = v.dims4()?;
        if factor == 1 {
            let out = v.clone();
            return Ok(self.push(out, Op::UpsampleBilinear { input, factor }, vec![]));
        }
        let (oh, ow) = (h * factor, w * factor);
        let taps_h = upsample_taps(h, oh);
        let taps_w = upsample_taps(w, ow);
        let plane = h * w;
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &v.data()[bc * plane..(bc + 1) * plane];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for (ohi, &(h0, h1, fh)) in taps_h.iter().enumerate() {
                for (owi, &(w0, w1, fw)) in taps_w.iter().enumerate() {
                    let v00 = src[h0 * w + w0].to_f64();
                    let v01 = src[h0 * w + w1].to_f64();
                    let v10 = src[h1 * w + w0].to_f64();
                    let v11 = src[h1 * w + w1].to_f64();
                    let top = v00 + (v01 - v00) * fw;
                    let bot = v10 + (v11 - v10) * fw;
                    dst[ohi * ow + owi] = T::from_f64(top + (bot - top) * fh);
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::UpsampleBilinear { input, factor }, vec![]))
    }

    /// Mean over non-overlapping (block_h, block_w) tiles; extents must divide.
    pub fn block_mean(&mut self, input: NodeId, block_h: usize, block_w: usize) -> Result<NodeId> {
        let v = self.value(input);
        let (b, c, h, w) = v.dims4()?;
        if block_h == 0 || block_w == 0 || h % block_h != 0 || w % block_w != 0 {
            return Err(Error::shape(format!(
                "block_mean: {h}x{w} not divisible into {block_h}x{block_w} blocks"
            )));
        }
        let (oh, ow) = (h / block_h, w / block_w);
        let area = (block_h * block_w) as f64;
        let plane = h * w;
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &v.data()[bc * plane..(bc + 1) * plane];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0f64;
                    for dh in 0..block_h {
                        let row = (ohi * block_h + dh) * w + owi * block_w;
                        for dw in 0..block_w {
                            acc += src[row + dw].to_f64();
                        }
                    }
                    dst[ohi * ow + owi] = T::from_f64(acc / area);
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::BlockMean { input, block_h, block_w }, vec![]))
    }

    /// Sample a BCHW tensor at normalized coordinates.
    ///
    /// `coords` is (B, H', W', 2) with channel 0 the vertical and channel 1
    /// the horizontal coordinate, both in [-1, 1]; (-1, -1) is pixel (0, 0)
    /// and (1, 1) is pixel (H-1, W-1). Out-of-range coordinates are a
    /// contract violation (the flow warp clamps before calling).
    pub fn sample_bilinear_normalized(&mut self, input: NodeId, coords: NodeId) -> Result<NodeId> {
        let (vi, vc) = self.values2(input, coords);
        let (b, c, h, w) = vi.dims4()?;
        let cs = vc.shape();
        if cs.len() != 4 || cs[0] != b || cs[3] != 2 {
            return Err(Error::shape(format!(
                "sample_bilinear_normalized: coords shape {cs:?} must be ({b}, H, W, 2)"
            )));
        }
        for (i, &v) in vc.data().iter().enumerate() {
            let vf = v.to_f64();
            if !(-1.0..=1.0).contains(&vf) {
                return Err(Error::contract(format!(
                    "sample_bilinear_normalized: coordinate {vf} at flat index {i} outside [-1, 1]"
                )));
            }
        }
        let (oh, ow) = (cs[1], cs[2]);
        let plane = h * w;
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bi in 0..b {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let cbase = ((bi * oh + ohi) * ow + owi) * 2;
                    let (py, px) = to_pixel(
                        vc.data()[cbase].to_f64(),
                        vc.data()[cbase + 1].to_f64(),
                        h,
                        w,
                    );
                    let t = Taps::at(py, px, h, w);
                    for ci in 0..c {
                        let src = &vi.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        out[((bi * c + ci) * oh + ohi) * ow + owi] =
                            T::from_f64(t.blend(src, w));
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::SampleBilinear { input, coords }, vec![]))
    }
}

/// Identity sampling coordinates for an (h, w) map, shape (h, w, 2), values in
/// [-1, 1]; sampling with this grid alone reproduces the input.
pub fn standard_grid<T: Scalar>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::shape("standard_grid: extents must be >= 1".to_string()));
    }
    let mut data = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        let y = if h == 1 { 0.0 } else { -1.0 + 2.0 * r as f64 / (h - 1) as f64 };
        for cidx in 0..w {
            let x = if w == 1 { 0.0 } else { -1.0 + 2.0 * cidx as f64 / (w - 1) as f64 };
            data.push(T::from_f64(y));
            data.push(T::from_f64(x));
        }
    }
    Tensor::from_vec(&[h, w, 2], data)
}

/// Batched standard grid, shape (b, h, w, 2).
pub fn standard_grid_batched<T: Scalar>(b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let one = standard_grid::<T>(h, w)?;
    let mut data = Vec::with_capacity(b * one.numel());
    for _ in 0..b {
        data.extend_from_slice(one.data());
    }
    Tensor::from_vec(&[b, h, w, 2], data)
}

fn to_pixel(y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
    let py = (y + 1.0) * 0.5 * (h - 1) as f64;
    let px = (x + 1.0) * 0.5 * (w - 1) as f64;
    (py, px)
}

/// Four-neighbor taps and weights for one sampling point.
struct Taps {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    fr: f64,
    fc: f64,
}

impl Taps {
    fn at(py: f64, px: f64, h: usize, w: usize) -> Taps {
        let r0 = py.floor().clamp(0.0, (h - 1) as f64) as usize;
        let c0 = px.floor().clamp(0.0, (w - 1) as f64) as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        Taps { r0, r1, c0, c1, fr: py - r0 as f64, fc: px - c0 as f64 }
    }

    fn blend<T: Scalar>(&self, src: &[T], w: usize) -> f64 {
        let v00 = src[self.r0 * w + self.c0].to_f64();
        let v01 = src[self.r0 * w + self.c1].to_f64();
        let v10 = src[self.r1 * w + self.c0].to_f64();
        let v11 = src[self.r1 * w + self.c1].to_f64();
        let top = v00 + (v01 - v00) * self.fc;
        let bot = v10 + (v11 - v10) * self.fc;
        top + (bot - top) * self.fr
    }
}

/// Per-destination source taps (i0, i1, frac) for integer-factor upsampling.
fn upsample_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let clamped = center.clamp(0.0, (src - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, clamped - i0 as f64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

pub(crate) fn backward_upsample<T: Scalar>(
    g: &Graph<T>,
    input: NodeId,
    factor: usize,
    up: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let v = g.value(input);
    if factor == 1 {
        return Ok(vec![(input, up.clone())]);
    }
    let (b, c, h, w) = v.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let taps_h = upsample_taps(h, oh);
    let taps_w = upsample_taps(w, ow);
    let mut grad = vec![0.0f64; v.numel()];
    let plane = h * w;
    for bc in 0..b * c {
        let dst = &mut grad[bc * plane..(bc + 1) * plane];
        let src = &up.data()[bc * oh * ow..(bc + 1) * oh * ow];
        for (ohi, &(h0, h1, fh)) in taps_h.iter().enumerate() {
            for (owi, &(w0, w1, fw)) in taps_w.iter().enumerate() {
                let u = src[ohi * ow + owi].to_f64();
                dst[h0 * w + w0] += u * (1.0 - fh) * (1.0 - fw);
                dst[h0 * w + w1] += u * (1.0 - fh) * fw;
                dst[h1 * w + w0] += u * fh * (1.0 - fw);
                dst[h1 * w + w1] += u * fh * fw;
            }
        }
    }
    let grad = Tensor::from_vec(v.shape(), grad.into_iter().map(T::from_f64).collect())?;
    Ok(vec![(input, grad)])
}

pub(crate) fn backward_block_mean<T: Scalar>(
    g: &Graph<T>,
    input: NodeId,
    block_h: usize,
    block_w: usize,
    up: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let v = g.value(input);
    let (b, c, h, w) = v.dims4()?;
    let (oh, ow) = (h / block_h, w / block_w);
    let area = (block_h * block_w) as f64;
    let plane = h * w;
    let mut grad = vec![T::zero(); v.numel()];
    for bc in 0..b * c {
        let dst = &mut grad[bc * plane..(bc + 1) * plane];
        let src = &up.data()[bc * oh * ow..(bc + 1) * oh * ow];
        for ohi in 0..oh {
            for owi in 0..ow {
                let u = T::from_f64(src[ohi * ow + owi].to_f64() / area);
                for dh in 0..block_h {
                    let row = (ohi * block_h + dh) * w + owi * block_w;
                    for dw in 0..block_w {
                        dst[row + dw] = u;
                    }
                }
            }
        }
    }
    Ok(vec![(input, Tensor::from_vec(v.shape(), grad)?)])
}

pub(crate) fn backward_sample<T: Scalar>(
    g: &Graph<T>,
    input: NodeId,
    coords: NodeId,
    up: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let (vi, vc) = g.values2(input, coords);
    let (b, c, h, w) = vi.dims4()?;
    let (oh, ow) = (vc.shape()[1], vc.shape()[2]);
    let plane = h * w;
    let mut d_input = vec![0.0f64; vi.numel()];
    let mut d_coords = vec![0.0f64; vc.numel()];
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let cbase = ((bi * oh + ohi) * ow + owi) * 2;
                let (py, px) = to_pixel(
                    vc.data()[cbase].to_f64(),
                    vc.data()[cbase + 1].to_f64(),
                    h,
                    w,
                );
                let t = Taps::at(py, px, h, w);
                // d pixel / d normalized coordinate
                let dy_scale = 0.5 * (h - 1) as f64;
                let dx_scale = 0.5 * (w - 1) as f64;
                let mut dpy = 0.0f64;
                let mut dpx = 0.0f64;
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let u = up.data()[((bi * c + ci) * oh + ohi) * ow + owi].to_f64();
                    let src = &vi.data()[base..base + plane];
                    let v00 = src[t.r0 * w + t.c0].to_f64();
                    let v01 = src[t.r0 * w + t.c1].to_f64();
                    let v10 = src[t.r1 * w + t.c0].to_f64();
                    let v11 = src[t.r1 * w + t.c1].to_f64();
                    d_input[base + t.r0 * w + t.c0] += u * (1.0 - t.fr) * (1.0 - t.fc);
                    d_input[base + t.r0 * w + t.c1] += u * (1.0 - t.fr) * t.fc;
                    d_input[base + t.r1 * w + t.c0] += u * t.fr * (1.0 - t.fc);
                    d_input[base + t.r1 * w + t.c1] += u * t.fr * t.fc;
                    let top = v00 + (v01 - v00) * t.fc;
                    let bot = v10 + (v11 - v10) * t.fc;
                    dpy += u * (bot - top);
                    dpx += u * ((v01 - v00) * (1.0 - t.fr) + (v11 - v10) * t.fr);
                }
                d_coords[cbase] += dpy * dy_scale;
                d_coords[cbase + 1] += dpx * dx_scale;
            }
        }
    }
    Ok(vec![
        (input, Tensor::from_vec(vi.shape(), d_input.into_iter().map(T::from_f64).collect())?),
        (coords, Tensor::from_vec(vc.shape(), d_coords.into_iter().map(T::from_f64).collect())?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::rand_uniform(&[1, 2, 3, 3], -1.0, 1.0, 1).unwrap();
        let i = g.constant(t.clone());
        let out = g.upsample_bilinear(i, 1).unwrap();
        assert_eq!(g.value(out), &t);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::full(&[1, 1, 3, 5], 3.0).unwrap());
        let out = g.upsample_bilinear(i, 2).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 6, 10]);
        for &v in g.value(out).data() {
            assert_relative_eq!(v, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsample_matches_reference_interpolation() {
        // Per-pixel half-pixel-convention oracle on a 2x2 input, factor 2.
        let mut g = Graph::<f64>::new();
        let i = g.constant(
            Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        );
        let out = g.upsample_bilinear(i, 2).unwrap();
        let src = [[0.0, 1.0], [2.0, 3.0]];
        let sample = |p: f64, q: f64| {
            let cl = |v: f64| v.clamp(0.0, 1.0);
            let (p, q) = (cl(p), cl(q));
            let (r0, c0) = (p.floor() as usize, q.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(1), (c0 + 1).min(1));
            let (fr, fc) = (p - r0 as f64, q - c0 as f64);
            let top = src[r0][c0] + (src[r0][c1] - src[r0][c0]) * fc;
            let bot = src[r1][c0] + (src[r1][c1] - src[r1][c0]) * fc;
            top + (bot - top) * fr
        };
        for d_r in 0..4 {
            for d_c in 0..4 {
                let expect = sample((d_r as f64 + 0.5) / 2.0 - 0.5, (d_c as f64 + 0.5) / 2.0 - 0.5);
                let got = g.value(out).data()[d_r * 4 + d_c];
                assert_relative_eq!(got, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn block_mean_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::full(&[1, 1, 4, 4], 2.5).unwrap());
        let out = g.block_mean(i, 2, 2).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 2, 2]);
        for &v in g.value(out).data() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn block_mean_matches_direct_summation() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = g.block_mean(i, 2, 2).unwrap();
        assert_eq!(g.value(out).data(), &[2.5]);
    }

    #[test]
    fn global_block_is_global_average_pool() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::rand_uniform(&[1, 2, 4, 6], -1.0, 1.0, 8).unwrap();
        let mean0: f64 = t.data()[..24].iter().sum::<f64>() / 24.0;
        let i = g.constant(t);
        let out = g.block_mean(i, 4, 6).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 2, 1, 1]);
        assert_relative_eq!(g.value(out).data()[0], mean0, epsilon = 1e-12);
    }

    #[test]
    fn block_mean_rejects_indivisible_extents() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::zeros(&[1, 1, 5, 4]).unwrap());
        assert!(g.block_mean(i, 2, 2).is_err());
    }

    #[test]
    fn block_mean_then_nearest_expansion_preserves_block_means() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::rand_uniform(&[1, 1, 4, 4], 0.0, 1.0, 13).unwrap();
        let i = g.constant(t);
        let out = g.block_mean(i, 2, 2).unwrap();
        // Nearest re-expansion repeats each mean over its block; the block
        // mean of the expansion equals the original mean exactly.
        let means = g.value(out).clone();
        let mut expanded = vec![0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                expanded[r * 4 + c] = means.data()[(r / 2) * 2 + c / 2];
            }
        }
        let e = g.constant(Tensor::from_vec(&[1, 1, 4, 4], expanded).unwrap());
        let again = g.block_mean(e, 2, 2).unwrap();
        assert_eq!(g.value(again).data(), means.data());
    }

    #[test]
    fn sampling_with_standard_grid_is_identity() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::rand_uniform(&[2, 3, 5, 7], -4.0, 4.0, 21).unwrap();
        let i = g.constant(t.clone());
        let c = g.constant(standard_grid_batched::<f64>(2, 5, 7).unwrap());
        let out = g.sample_bilinear_normalized(i, c).unwrap();
        for (o, e) in g.value(out).data().iter().zip(t.data()) {
            assert_relative_eq!(o, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn midpoint_sample_averages_neighbors() {
        // 1x2 image [0, 1]: sampling at normalized x=0 lands between pixels.
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let c = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        let out = g.sample_bilinear_normalized(i, c).unwrap();
        assert_relative_eq!(g.value(out).data()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn random_sampling_matches_scalar_oracle() {
        let mut g = Graph::<f64>::new();
        let img = Tensor::<f64>::rand_uniform(&[1, 2, 6, 5], -2.0, 2.0, 31).unwrap();
        let coords = Tensor::<f64>::rand_uniform(&[1, 4, 3, 2], -0.99, 0.99, 32).unwrap();
        let i = g.constant(img.clone());
        let c = g.constant(coords.clone());
        let out = g.sample_bilinear_normalized(i, c).unwrap();
        for ohi in 0..4 {
            for owi in 0..3 {
                let y = coords.data()[(ohi * 3 + owi) * 2];
                let x = coords.data()[(ohi * 3 + owi) * 2 + 1];
                let py = (y + 1.0) / 2.0 * 5.0;
                let px = (x + 1.0) / 2.0 * 4.0;
                for ci in 0..2 {
                    let at = |r: usize, cc: usize| img.data()[(ci * 6 + r) * 5 + cc];
                    let (r0, c0) = (py.floor() as usize, px.floor() as usize);
                    let (r1, c1) = ((r0 + 1).min(5), (c0 + 1).min(4));
                    let (fr, fc) = (py - r0 as f64, px - c0 as f64);
                    let expect = at(r0, c0) * (1.0 - fr) * (1.0 - fc)
                        + at(r0, c1) * (1.0 - fr) * fc
                        + at(r1, c0) * fr * (1.0 - fc)
                        + at(r1, c1) * fr * fc;
                    let got = g.value(out).data()[(ci * 4 + ohi) * 3 + owi];
                    assert_relative_eq!(got, expect, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn out_of_range_coordinates_are_a_contract_violation() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let c = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.5]).unwrap());
        assert!(g.sample_bilinear_normalized(i, c).is_err());
    }

    #[test]
    fn standard_grid_corners() {
        let grid = standard_grid::<f64>(3, 3).unwrap();
        assert_eq!(&grid.data()[..2], &[-1.0, -1.0]);
        assert_eq!(&grid.data()[16..18], &[1.0, 1.0]);
        assert_eq!(&grid.data()[8..10], &[0.0, 0.0]);
    }
}
