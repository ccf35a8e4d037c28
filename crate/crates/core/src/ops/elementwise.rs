//! Elementwise arithmetic, activations, reductions and layout ops.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::ops::ElementwiseKind;
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(f64, f64) -> f64) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| T::from_f64(f(x.to_f64(), y.to_f64())))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map preserves shape")
}

impl<T: Scalar> Graph<T> {
    /// Spec entry point for tensor-tensor elementwise ops.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        match kind {
            ElementwiseKind::Add => self.add(a, b),
            ElementwiseKind::Sub => self.sub(a, b),
            ElementwiseKind::Mul => self.mul(a, b),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.values2(a, b);
        same_shape(va, vb, "add")?;
        let out = zip_map(va, vb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), vec![]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.values2(a, b);
        same_shape(va, vb, "sub")?;
        let out = zip_map(va, vb, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), vec![]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.values2(a, b);
        same_shape(va, vb, "mul")?;
        let out = zip_map(va, vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), vec![]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.values2(a, b);
        same_shape(va, vb, "div")?;
        let out = zip_map(va, vb, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), vec![]))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| T::from_f64(v.to_f64() * factor));
        Ok(self.push(out, Op::Scale(a, factor), vec![]))
    }

    /// Add a constant scalar.
    pub fn add_scalar(&mut self, a: NodeId, addend: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| T::from_f64(v.to_f64() + addend));
        Ok(self.push(out, Op::AddScalar(a, addend), vec![]))
    }

    /// Clamp every element into `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::config(format!("clamp: empty range [{lo}, {hi}]")));
        }
        let out = self.value(a).map(|v| T::from_f64(v.to_f64().clamp(lo, hi)));
        Ok(self.push(out, Op::Clamp(a, lo, hi), vec![]))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| if v.to_f64() > 0.0 { v } else { T::zero() });
        Ok(self.push(out, Op::Relu(a), vec![]))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| T::from_f64(sigmoid_f64(v.to_f64())));
        Ok(self.push(out, Op::Sigmoid(a), vec![]))
    }

    /// Natural log. The caller guarantees positive inputs.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| T::from_f64(v.to_f64().ln()));
        Ok(self.push(out, Op::Log(a), vec![]))
    }

    /// Softmax over the channel axis of a BCHW tensor. Channel sums are 1.
    pub fn softmax_ch(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (b, c, h, w) = va.dims4()?;
        let out = softmax_channels(va, b, c, h, w, false);
        Ok(self.push(out, Op::SoftmaxCh(a), vec![]))
    }

    /// Numerically stable log-softmax over the channel axis.
    pub fn log_softmax_ch(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (b, c, h, w) = va.dims4()?;
        let out = softmax_channels(va, b, c, h, w, true);
        Ok(self.push(out, Op::LogSoftmaxCh(a), vec![]))
    }

    /// Concatenate BCHW tensors along the channel axis.
    pub fn concat_ch(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::contract("concat_ch needs at least one input"));
        }
        let (b0, _, h0, w0) = self.value(ids[0]).dims4()?;
        let mut c_total = 0usize;
        for &id in ids {
            let (b, c, h, w) = self.value(id).dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::shape(format!(
                    "concat_ch: incompatible shapes {:?} vs {:?}",
                    self.value(ids[0]).shape(),
                    self.value(id).shape()
                )));
            }
            c_total += c;
        }
        let plane = h0 * w0;
        let mut data = Vec::with_capacity(b0 * c_total * plane);
        for bi in 0..b0 {
            for &id in ids {
                let v = self.value(id);
                let c = v.shape()[1];
                let start = bi * c * plane;
                data.extend_from_slice(&v.data()[start..start + c * plane]);
            }
        }
        let out = Tensor::from_vec(&[b0, c_total, h0, w0], data)?;
        Ok(self.push(out, Op::ConcatCh(ids.to_vec()), vec![]))
    }

    /// BCHW -> BHWC.
    pub fn permute_bhwc(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (b, c, h, w) = va.dims4()?;
        let src = va.data();
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data[((bi * h + hi) * w + wi) * c + ci] =
                            src[((bi * c + ci) * h + hi) * w + wi];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[b, h, w, c], data)?;
        Ok(self.push(out, Op::PermuteBhwc(a), vec![]))
    }

    /// Metadata-only reshape; element count must be preserved.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::from_vec(shape, va.data().to_vec()).map_err(|_| {
            Error::shape(format!("reshape {:?} -> {:?} changes element count", va.shape(), shape))
        })?;
        Ok(self.push(out, Op::Reshape(a), vec![]))
    }

    /// Multiply each channel map of a BCHW tensor by a per-channel scalar mask
    /// of shape (B, C, 1, 1).
    pub fn mul_channel_mask(&mut self, input: NodeId, mask: NodeId) -> Result<NodeId> {
        let (vi, vm) = self.values2(input, mask);
        let (b, c, h, w) = vi.dims4()?;
        let (mb, mc, mh, mw) = vm.dims4()?;
        if (mb, mc, mh, mw) != (b, c, 1, 1) {
            return Err(Error::shape(format!(
                "mul_channel_mask: mask shape {:?} does not match input {:?}",
                vm.shape(),
                vi.shape()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(vi.numel());
        for bc in 0..b * c {
            let m = vm.data()[bc].to_f64();
            for &x in &vi.data()[bc * plane..(bc + 1) * plane] {
                data.push(T::from_f64(x.to_f64() * m));
            }
        }
        let out = Tensor::from_vec(vi.shape(), data)?;
        Ok(self.push(out, Op::MulChannelMask { input, mask }, vec![]))
    }

    /// Sum every element into a [1]-shaped tensor (64-bit accumulation).
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        let out = Tensor::scalar(T::from_f64(total));
        Ok(self.push(out, Op::SumAll(a), vec![]))
    }

    /// Sum a BCHW tensor over batch and spatial axes into a [C] vector.
    pub fn sum_per_channel(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (b, c, h, w) = va.dims4()?;
        let plane = h * w;
        let mut sums = vec![0.0f64; c];
        for bi in 0..b {
            for ci in 0..c {
                let start = (bi * c + ci) * plane;
                sums[ci] += va.data()[start..start + plane]
                    .iter()
                    .map(|v| v.to_f64())
                    .sum::<f64>();
            }
        }
        let out = Tensor::from_vec(&[c], sums.into_iter().map(T::from_f64).collect())?;
        Ok(self.push(out, Op::SumPerChannel(a), vec![]))
    }

    /// Mean of every element as a [1]-shaped tensor.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_channels<T: Scalar>(
    v: &Tensor<T>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    log: bool,
) -> Tensor<T> {
    let plane = h * w;
    let src = v.data();
    let mut data = vec![T::zero(); src.len()];
    for bi in 0..b {
        for p in 0..plane {
            let at = |ci: usize| src[(bi * c + ci) * plane + p].to_f64();
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(at(ci));
            }
            let mut denom = 0.0f64;
            for ci in 0..c {
                denom += (at(ci) - max).exp();
            }
            let log_denom = denom.ln();
            for ci in 0..c {
                let shifted = at(ci) - max;
                let val = if log { shifted - log_denom } else { (shifted - log_denom).exp() };
                data[(bi * c + ci) * plane + p] = T::from_f64(val);
            }
        }
    }
    Tensor::from_vec(v.shape(), data).expect("softmax preserves shape")
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

type Contribs<T> = Vec<(NodeId, Tensor<T>)>;

pub(crate) fn backward_add<T: Scalar>(
    a: NodeId,
    b: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    Ok(vec![(a, up.clone()), (b, up.clone())])
}

pub(crate) fn backward_sub<T: Scalar>(
    a: NodeId,
    b: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let neg = up.map(|v| T::from_f64(-v.to_f64()));
    Ok(vec![(a, up.clone()), (b, neg)])
}

pub(crate) fn backward_mul<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    b: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let (va, vb) = g.values2(a, b);
    Ok(vec![(a, zip_map(up, vb, |u, y| u * y)), (b, zip_map(up, va, |u, x| u * x))])
}

pub(crate) fn backward_div<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    b: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let (va, vb) = g.values2(a, b);
    let da = zip_map(up, vb, |u, y| u / y);
    let db_data: Vec<T> = up
        .data()
        .iter()
        .zip(va.data().iter().zip(vb.data()))
        .map(|(&u, (&x, &y))| {
            let y = y.to_f64();
            T::from_f64(-u.to_f64() * x.to_f64() / (y * y))
        })
        .collect();
    let db = Tensor::from_vec(up.shape(), db_data)?;
    Ok(vec![(a, da), (b, db)])
}

pub(crate) fn backward_scale<T: Scalar>(
    a: NodeId,
    factor: f64,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    Ok(vec![(a, up.map(|v| T::from_f64(v.to_f64() * factor)))])
}

pub(crate) fn backward_relu<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let grad = zip_map(up, g.value(a), |u, x| if x > 0.0 { u } else { 0.0 });
    Ok(vec![(a, grad)])
}

pub(crate) fn backward_clamp<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    lo: f64,
    hi: f64,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let grad = zip_map(up, g.value(a), |u, x| if (lo..=hi).contains(&x) { u } else { 0.0 });
    Ok(vec![(a, grad)])
}

pub(crate) fn backward_sigmoid<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    out: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let grad = zip_map(up, g.value(out), |u, s| u * s * (1.0 - s));
    Ok(vec![(a, grad)])
}

pub(crate) fn backward_log<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let grad = zip_map(up, g.value(a), |u, x| u / x);
    Ok(vec![(a, grad)])
}

pub(crate) fn backward_softmax_ch<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    out: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let probs = g.value(out);
    let (b, c, h, w) = probs.dims4()?;
    let plane = h * w;
    let mut grad = vec![T::zero(); probs.numel()];
    for bi in 0..b {
        for p in 0..plane {
            let mut dot = 0.0f64;
            for ci in 0..c {
                let i = (bi * c + ci) * plane + p;
                dot += up.data()[i].to_f64() * probs.data()[i].to_f64();
            }
            for ci in 0..c {
                let i = (bi * c + ci) * plane + p;
                let s = probs.data()[i].to_f64();
                grad[i] = T::from_f64(s * (up.data()[i].to_f64() - dot));
            }
        }
    }
    Ok(vec![(a, Tensor::from_vec(probs.shape(), grad)?)])
}

pub(crate) fn backward_log_softmax_ch<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    out: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let logp = g.value(out);
    let (b, c, h, w) = logp.dims4()?;
    let plane = h * w;
    let mut grad = vec![T::zero(); logp.numel()];
    for bi in 0..b {
        for p in 0..plane {
            let mut up_sum = 0.0f64;
            for ci in 0..c {
                up_sum += up.data()[(bi * c + ci) * plane + p].to_f64();
            }
            for ci in 0..c {
                let i = (bi * c + ci) * plane + p;
                let prob = logp.data()[i].to_f64().exp();
                grad[i] = T::from_f64(up.data()[i].to_f64() - prob * up_sum);
            }
        }
    }
    Ok(vec![(a, Tensor::from_vec(logp.shape(), grad)?)])
}

pub(crate) fn backward_concat_ch<T: Scalar>(
    g: &Graph<T>,
    ids: &[NodeId],
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let (b, _c_total, h, w) = up.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(ids.len());
    let mut ch_offset = 0usize;
    let c_total = up.shape()[1];
    for &id in ids {
        let c = g.value(id).shape()[1];
        let mut data = Vec::with_capacity(b * c * plane);
        for bi in 0..b {
            let start = (bi * c_total + ch_offset) * plane;
            data.extend_from_slice(&up.data()[start..start + c * plane]);
        }
        out.push((id, Tensor::from_vec(g.value(id).shape(), data)?));
        ch_offset += c;
    }
    Ok(out)
}

pub(crate) fn backward_permute_bhwc<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let (b, c, h, w) = g.value(a).dims4()?;
    let mut data = vec![T::zero(); up.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    data[((bi * c + ci) * h + hi) * w + wi] =
                        up.data()[((bi * h + hi) * w + wi) * c + ci];
                }
            }
        }
    }
    Ok(vec![(a, Tensor::from_vec(g.value(a).shape(), data)?)])
}

pub(crate) fn backward_mul_channel_mask<T: Scalar>(
    g: &Graph<T>,
    input: NodeId,
    mask: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let (vi, vm) = g.values2(input, mask);
    let (b, c, h, w) = vi.dims4()?;
    let plane = h * w;
    let mut d_input = Vec::with_capacity(vi.numel());
    let mut d_mask = vec![T::zero(); b * c];
    for bc in 0..b * c {
        let m = vm.data()[bc].to_f64();
        let mut acc = 0.0f64;
        for p in 0..plane {
            let i = bc * plane + p;
            let u = up.data()[i].to_f64();
            d_input.push(T::from_f64(u * m));
            acc += u * vi.data()[i].to_f64();
        }
        d_mask[bc] = T::from_f64(acc);
    }
    Ok(vec![
        (input, Tensor::from_vec(vi.shape(), d_input)?),
        (mask, Tensor::from_vec(vm.shape(), d_mask)?),
    ])
}

pub(crate) fn backward_sum_all<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let u = up.data()[0];
    Ok(vec![(a, Tensor::full(g.value(a).shape(), u)?)])
}

pub(crate) fn backward_sum_per_channel<T: Scalar>(
    g: &Graph<T>,
    a: NodeId,
    up: &Tensor<T>,
) -> Result<Contribs<T>> {
    let va = g.value(a);
    let (b, c, h, w) = va.dims4()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(va.numel());
    for bi in 0..b {
        for ci in 0..c {
            let u = up.data()[ci];
            let _ = bi;
            data.extend(std::iter::repeat(u).take(plane));
        }
    }
    Ok(vec![(a, Tensor::from_vec(va.shape(), data)?)])
}
