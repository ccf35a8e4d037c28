//! 2-D convolution with stride and dilation.
//!
//! Layout is BCHW row-major, weights are (out, in, kh, kw). The effective
//! kernel extent is `(k - 1) * dilation + 1`; "same-effective" padding keeps
//! H and W at stride 1 for any dilation and requires odd kernels.
//!
//! Forward parallelizes over (batch, out-channel) planes and backward over
//! samples / out-channels; every output element is owned by exactly one task
//! and cross-sample reductions run in a fixed order, so results do not depend
//! on the worker count. Accumulation is in f64.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Scalar, Tensor};

/// Padding policy for [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(effective_kernel - 1) / 2` on each side.
    SameEffective,
    Explicit(usize),
}

/// Resolved convolution attributes recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

/// Hyperparameters of a conv layer as accepted by [`Graph::conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct Conv2dParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, dilation: 1, padding: Padding::SameEffective }
    }
}

pub(crate) fn effective_extent(k: usize, dilation: usize) -> usize {
    (k - 1) * dilation + 1
}

fn out_extent(input: usize, pad: usize, eff_k: usize, stride: usize) -> usize {
    (input + 2 * pad - eff_k) / stride + 1
}

impl<T: Scalar> Graph<T> {
    /// Record `conv2d(input, weight) + bias`.
    ///
    /// `weight` is (out_ch, in_ch, kh, kw); `bias` is ([out_ch]).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        params: Conv2dParams,
    ) -> Result<NodeId> {
        let attrs = self.conv2d_check(input, weight, bias, params)?;
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), attrs);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, attrs }, vec![]))
    }

    fn conv2d_check(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        params: Conv2dParams,
    ) -> Result<Conv2dAttrs> {
        let (_, c_in, h, w) = self.value(input).dims4()?;
        let (_, wc_in, kh, kw) = self.value(weight).dims4()?;
        let oc = self.value(weight).shape()[0];
        if params.stride == 0 || params.dilation == 0 {
            return Err(Error::config("conv2d stride and dilation must be >= 1".to_string()));
        }
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if self.value(bias).shape() != [oc] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {oc} output channels",
                self.value(bias).shape()
            )));
        }
        let eff_h = effective_extent(kh, params.dilation);
        let eff_w = effective_extent(kw, params.dilation);
        let pad = match params.padding {
            Padding::Explicit(p) => p,
            Padding::SameEffective => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::config(format!(
                        "same-effective padding requires odd kernels, got {kh}x{kw}"
                    )));
                }
                // kh == kw is not required; pad is per the taller extent only
                // when they agree. Reject asymmetric kernels to keep padding
                // unambiguous.
                if eff_h != eff_w {
                    return Err(Error::config(format!(
                        "same-effective padding requires square effective kernels, got {eff_h}x{eff_w}"
                    )));
                }
                (eff_h - 1) / 2
            }
        };
        if eff_h > h + 2 * pad || eff_w > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: effective kernel {eff_h}x{eff_w} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Conv2dAttrs { stride: params.stride, dilation: params.dilation, pad })
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    attrs: Conv2dAttrs,
) -> Tensor<T> {
    let (b, c_in, h, w) = input.dims4().expect("checked");
    let (oc, _, kh, kw) = weight.dims4().expect("checked");
    let Conv2dAttrs { stride, dilation, pad } = attrs;
    let oh = out_extent(h, pad, effective_extent(kh, dilation), stride);
    let ow = out_extent(w, pad, effective_extent(kw, dilation), stride);

    let src = input.data();
    let wdat = weight.data();
    let mut out = vec![T::zero(); b * oc * oh * ow];
    let work = |(plane_idx, out_plane): (usize, &mut [T])| {
        let bi = plane_idx / oc;
        let oci = plane_idx % oc;
        let bias_v = bias.data()[oci].to_f64();
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut acc = bias_v;
                let ih0 = (ohi * stride) as isize - pad as isize;
                let iw0 = (owi * stride) as isize - pad as isize;
                for ci in 0..c_in {
                    let in_base = (bi * c_in + ci) * h * w;
                    let w_base = ((oci * c_in + ci) * kh) * kw;
                    for khi in 0..kh {
                        let ih = ih0 + (khi * dilation) as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = in_base + ih as usize * w;
                        let wrow = w_base + khi * kw;
                        for kwi in 0..kw {
                            let iw = iw0 + (kwi * dilation) as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += src[row + iw as usize].to_f64()
                                * wdat[wrow + kwi].to_f64();
                        }
                    }
                }
                out_plane[ohi * ow + owi] = T::from_f64(acc);
            }
        }
    };
    // Tiny workloads skip the thread pool; each output plane is owned by one
    // task either way, so results are identical.
    let macs = b * oc * oh * ow * c_in * kh * kw;
    if macs < PARALLEL_MACS {
        out.chunks_mut(oh * ow).enumerate().for_each(work);
    } else {
        out.par_chunks_mut(oh * ow).enumerate().for_each(work);
    }
    Tensor::from_vec(&[b, oc, oh, ow], out).expect("conv output shape")
}

/// Below this many multiply-accumulates a kernel runs serially.
const PARALLEL_MACS: usize = 1 << 18;

pub(crate) fn backward<T: Scalar>(
    g: &Graph<T>,
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    attrs: &Conv2dAttrs,
    up: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let vi = g.value(input);
    let vw = g.value(weight);
    let (b, c_in, h, w) = vi.dims4()?;
    let (oc, _, kh, kw) = vw.dims4()?;
    let (_, _, oh, ow) = up.dims4()?;
    let Conv2dAttrs { stride, dilation, pad } = *attrs;

    let macs = b * oc * oh * ow * c_in * kh * kw;

    // d_input: per-sample scatter, samples in parallel.
    let mut d_input = vec![T::zero(); vi.numel()];
    let input_work = |(bi, dst): (usize, &mut [T])| {
        let mut acc = vec![0.0f64; c_in * h * w];
        for oci in 0..oc {
            let up_plane = (bi * oc + oci) * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let u = up.data()[up_plane + ohi * ow + owi].to_f64();
                    if u == 0.0 {
                        continue;
                    }
                    let ih0 = (ohi * stride) as isize - pad as isize;
                    let iw0 = (owi * stride) as isize - pad as isize;
                    for ci in 0..c_in {
                        let w_base = ((oci * c_in + ci) * kh) * kw;
                        for khi in 0..kh {
                            let ih = ih0 + (khi * dilation) as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iw = iw0 + (kwi * dilation) as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc[(ci * h + ih as usize) * w + iw as usize] +=
                                    u * vw.data()[w_base + khi * kw + kwi].to_f64();
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = T::from_f64(a);
        }
    };
    if macs < PARALLEL_MACS {
        d_input.chunks_mut(c_in * h * w).enumerate().for_each(input_work);
    } else {
        d_input.par_chunks_mut(c_in * h * w).enumerate().for_each(input_work);
    }

    // d_weight and d_bias: out-channels in parallel, batch summed in order.
    let mut d_weight = vec![T::zero(); vw.numel()];
    let mut d_bias = vec![T::zero(); oc];
    let weight_work = |(oci, (dw, db)): (usize, (&mut [T], &mut T))| {
            let mut wacc = vec![0.0f64; c_in * kh * kw];
            let mut bacc = 0.0f64;
            for bi in 0..b {
                let up_plane = (bi * oc + oci) * oh * ow;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let u = up.data()[up_plane + ohi * ow + owi].to_f64();
                        if u == 0.0 {
                            continue;
                        }
                        bacc += u;
                        let ih0 = (ohi * stride) as isize - pad as isize;
                        let iw0 = (owi * stride) as isize - pad as isize;
                        for ci in 0..c_in {
                            let in_base = (bi * c_in + ci) * h * w;
                            for khi in 0..kh {
                                let ih = ih0 + (khi * dilation) as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let row = in_base + ih as usize * w;
                                for kwi in 0..kw {
                                    let iw = iw0 + (kwi * dilation) as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    wacc[(ci * kh + khi) * kw + kwi] +=
                                        u * vi.data()[row + iw as usize].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            for (d, a) in dw.iter_mut().zip(wacc) {
                *d = T::from_f64(a);
            }
            *db = T::from_f64(bacc);
    };
    if macs < PARALLEL_MACS {
        d_weight
            .chunks_mut(c_in * kh * kw)
            .zip(d_bias.iter_mut())
            .enumerate()
            .for_each(weight_work);
    } else {
        d_weight
            .par_chunks_mut(c_in * kh * kw)
            .zip(d_bias.par_iter_mut())
            .enumerate()
            .for_each(weight_work);
    }

    Ok(vec![
        (input, Tensor::from_vec(vi.shape(), d_input)?),
        (weight, Tensor::from_vec(vw.shape(), d_weight)?),
        (bias, Tensor::from_vec(&[oc], d_bias)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent quadruple-loop convolution oracle (zero padding).
    fn conv_oracle(
        input: &[f64],
        (c_in, h, w): (usize, usize, usize),
        weight: &[f64],
        (oc, kh, kw): (usize, usize, usize),
        bias: &[f64],
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - ((kh - 1) * dilation + 1)) / stride + 1;
        let ow = (w + 2 * pad - ((kw - 1) * dilation + 1)) / stride + 1;
        let mut out = vec![0.0; oc * oh * ow];
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky * dilation) as isize - pad as isize;
                                let ix = (x * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input[(c * h + iy as usize) * w + ix as usize]
                                    * weight[((o * c_in + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    fn run_conv(
        input: Tensor<f64>,
        weight: Tensor<f64>,
        bias: Tensor<f64>,
        params: Conv2dParams,
    ) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let i = g.constant(input);
        let w = g.constant(weight);
        let b = g.constant(bias);
        let out = g.conv2d(i, w, b, params).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = Tensor::rand_uniform(&[1, 1, 5, 5], -1.0, 1.0, 3).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let weight = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let out = run_conv(input.clone(), weight, bias, Conv2dParams::default());
        assert_eq!(out.shape(), input.shape());
        for (o, i) in out.data().iter().zip(input.data()) {
            assert_relative_eq!(o, i, epsilon = 1e-12);
        }
    }

    #[test]
    fn dilation_two_has_effective_extent_five() {
        assert_eq!(effective_extent(3, 2), 5);
        // 5x5 input with dilation-2 same padding keeps the spatial extent.
        let input = Tensor::<f64>::rand_uniform(&[1, 1, 5, 5], -1.0, 1.0, 5).unwrap();
        let weight = Tensor::rand_uniform(&[1, 1, 3, 3], -1.0, 1.0, 6).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let out = run_conv(
            input,
            weight,
            bias,
            Conv2dParams { dilation: 2, ..Conv2dParams::default() },
        );
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
    }

    #[test]
    fn strided_ones_kernel_matches_direct_summation() {
        let input = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0).unwrap();
        let weight = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let out = run_conv(
            input.clone(),
            weight.clone(),
            bias.clone(),
            Conv2dParams { stride: 2, padding: Padding::Explicit(1), ..Conv2dParams::default() },
        );
        let (expect, oh, ow) =
            conv_oracle(input.data(), (1, 4, 4), weight.data(), (1, 3, 3), &[0.0], 2, 1, 1);
        assert_eq!(out.shape(), &[1, 1, oh, ow]);
        assert_eq!(out.data()[0], 4.0, "corner sees a 2x2 live patch of ones");
        for (o, e) in out.data().iter().zip(&expect) {
            assert_relative_eq!(o, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_conv_matches_oracle() {
        for (seed, stride, dilation, pad) in
            [(1u64, 1usize, 1usize, 0usize), (2, 2, 1, 1), (3, 1, 2, 2), (4, 2, 2, 3)]
        {
            let input = Tensor::<f64>::rand_uniform(&[2, 3, 8, 7], -1.0, 1.0, seed).unwrap();
            let weight =
                Tensor::<f64>::rand_uniform(&[4, 3, 3, 3], -1.0, 1.0, seed + 100).unwrap();
            let bias = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, seed + 200).unwrap();
            let out = run_conv(
                input.clone(),
                weight.clone(),
                bias.clone(),
                Conv2dParams { stride, dilation, padding: Padding::Explicit(pad) },
            );
            for bi in 0..2 {
                let plane = 3 * 8 * 7;
                let (expect, oh, ow) = conv_oracle(
                    &input.data()[bi * plane..(bi + 1) * plane],
                    (3, 8, 7),
                    weight.data(),
                    (4, 3, 3),
                    bias.data(),
                    stride,
                    dilation,
                    pad,
                );
                let got = &out.data()[bi * 4 * oh * ow..(bi + 1) * 4 * oh * ow];
                for (o, e) in got.iter().zip(&expect) {
                    assert_relative_eq!(o, e, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel_rejected() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        assert!(g.conv2d(i, w, b, Conv2dParams::default()).is_err());

        let w2 = g.constant(Tensor::zeros(&[1, 2, 7, 7]).unwrap());
        assert!(g
            .conv2d(i, w2, b, Conv2dParams { padding: Padding::Explicit(0), ..Default::default() })
            .is_err());
    }

    #[test]
    fn same_padding_preserves_extent_for_random_odd_kernels() {
        for (k, d, seed) in [(1usize, 1usize, 10u64), (3, 1, 11), (3, 3, 12), (5, 2, 13), (7, 4, 14)] {
            let input = Tensor::<f64>::rand_uniform(&[1, 2, 31, 29], -1.0, 1.0, seed).unwrap();
            let weight =
                Tensor::<f64>::rand_uniform(&[2, 2, k, k], -0.5, 0.5, seed + 1).unwrap();
            let bias = Tensor::<f64>::zeros(&[2]).unwrap();
            let out = run_conv(
                input,
                weight,
                bias,
                Conv2dParams { dilation: d, ..Conv2dParams::default() },
            );
            assert_eq!(out.shape(), &[1, 2, 31, 29], "k={k} d={d}");
        }
    }
}
