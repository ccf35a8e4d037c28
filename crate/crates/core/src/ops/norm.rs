//! Group normalization.
//!
//! Statistics are computed per (sample, group) over the group's channels and
//! all spatial positions, in f64. The affine pair (gamma, beta) is per channel.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Scalar, Tensor};

/// Affine + grouping hyperparameters for [`Graph::group_norm`].
#[derive(Debug, Clone, Copy)]
pub struct GroupNormParams {
    pub groups: usize,
    pub eps: f64,
}

impl Default for GroupNormParams {
    fn default() -> Self {
        GroupNormParams { groups: 8, eps: 1e-5 }
    }
}

/// The largest divisor of `channels` that is <= `preferred` (so small layers
/// still get a valid grouping).
pub fn fitting_group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl<T: Scalar> Graph<T> {
    pub fn group_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        params: GroupNormParams,
    ) -> Result<NodeId> {
        let v = self.value(input);
        let (b, c, h, w) = v.dims4()?;
        if params.groups == 0 || c % params.groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {c} channels not divisible into {} groups",
                params.groups
            )));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(format!(
                    "group_norm: {name} shape {:?} does not match {c} channels",
                    self.value(id).shape()
                )));
            }
        }
        let groups = params.groups;
        let eps = params.eps;
        let group_ch = c / groups;
        let plane = h * w;
        let group_len = group_ch * plane;

        let src = v.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); b * groups];
        let mut out = vec![T::zero(); src.len()];
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        for bi in 0..b {
            for gi in 0..groups {
                let start = (bi * c + gi * group_ch) * plane;
                let slice = &src[start..start + group_len];
                let mean = slice.iter().map(|v| v.to_f64()).sum::<f64>() / group_len as f64;
                let var = slice.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>()
                    / group_len as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[bi * groups + gi] = T::from_f64(istd);
                for (j, &x) in slice.iter().enumerate() {
                    let ch = gi * group_ch + j / plane;
                    let nx = (x.to_f64() - mean) * istd;
                    xhat[start + j] = T::from_f64(nx);
                    out[start + j] =
                        T::from_f64(nx * gd[ch].to_f64() + bd[ch].to_f64());
                }
            }
        }
        let saved = vec![
            Tensor::from_vec(v.shape(), xhat)?,
            Tensor::from_vec(&[b, groups], inv_std)?,
        ];
        let out = Tensor::from_vec(v.shape(), out)?;
        Ok(self.push(out, Op::GroupNorm { input, gamma, beta, groups, eps }, saved))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    g: &Graph<T>,
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    groups: usize,
    _eps: f64,
    node: NodeId,
    up: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let v = g.value(input);
    let (b, c, h, w) = v.dims4()?;
    let group_ch = c / groups;
    let plane = h * w;
    let group_len = group_ch * plane;
    let saved = &g.nodes[node.index()].saved;
    let xhat = saved[0].data();
    let inv_std = saved[1].data();
    let gamma_d = g.value(gamma).data();

    let mut d_input = vec![T::zero(); v.numel()];
    let mut d_gamma = vec![0.0f64; c];
    let mut d_beta = vec![0.0f64; c];

    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * group_ch) * plane;
            let istd = inv_std[bi * groups + gi].to_f64();
            // dy_hat = up * gamma; input grad needs its mean and its xhat-dot.
            let mut mean_dyh = 0.0f64;
            let mut mean_dyh_xhat = 0.0f64;
            for j in 0..group_len {
                let ch = gi * group_ch + j / plane;
                let u = up.data()[start + j].to_f64();
                let xh = xhat[start + j].to_f64();
                let dyh = u * gamma_d[ch].to_f64();
                mean_dyh += dyh;
                mean_dyh_xhat += dyh * xh;
                d_gamma[ch] += u * xh;
                d_beta[ch] += u;
            }
            mean_dyh /= group_len as f64;
            mean_dyh_xhat /= group_len as f64;
            for j in 0..group_len {
                let ch = gi * group_ch + j / plane;
                let u = up.data()[start + j].to_f64();
                let xh = xhat[start + j].to_f64();
                let dyh = u * gamma_d[ch].to_f64();
                d_input[start + j] =
                    T::from_f64(istd * (dyh - mean_dyh - xh * mean_dyh_xhat));
            }
        }
    }

    Ok(vec![
        (input, Tensor::from_vec(v.shape(), d_input)?),
        (gamma, Tensor::from_vec(&[c], d_gamma.into_iter().map(T::from_f64).collect())?),
        (beta, Tensor::from_vec(&[c], d_beta.into_iter().map(T::from_f64).collect())?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn run(
        input: Tensor<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        groups: usize,
    ) -> Tensor<f64> {
        let c = input.shape()[1];
        let mut g = Graph::<f64>::new();
        let i = g.constant(input);
        let ga = g.constant(Tensor::from_vec(&[c], gamma).unwrap());
        let be = g.constant(Tensor::from_vec(&[c], beta).unwrap());
        let out = g.group_norm(i, ga, be, GroupNormParams { groups, eps: 1e-5 }).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let out = run(Tensor::full(&[1, 4, 3, 3], 7.0).unwrap(), vec![1.0; 4], vec![0.0; 4], 2);
        for &v in out.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn zero_gamma_passes_beta_through() {
        let out = run(
            Tensor::rand_uniform(&[1, 4, 2, 2], -1.0, 1.0, 9).unwrap(),
            vec![0.0; 4],
            vec![5.0; 4],
            2,
        );
        for &v in out.data() {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn normalized_moments_are_standard() {
        // Moments recomputed on the output must be (0, 1) within 1e-4.
        let input =
            Tensor::<f64>::rand_uniform(&[1, 8, 4, 4], -2.0, 2.0, 11).unwrap();
        let out = run(input, vec![1.0; 8], vec![0.0; 8], 2);
        let group_len = 4 * 16;
        for gi in 0..2 {
            let slice = &out.data()[gi * group_len..(gi + 1) * group_len];
            let mean = slice.iter().sum::<f64>() / group_len as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group_len as f64;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-4);
            assert_relative_eq!(var, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn indivisible_grouping_rejected() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::zeros(&[1, 6, 2, 2]).unwrap());
        let ga = g.constant(Tensor::full(&[6], 1.0).unwrap());
        let be = g.constant(Tensor::zeros(&[6]).unwrap());
        assert!(g.group_norm(i, ga, be, GroupNormParams { groups: 4, eps: 1e-5 }).is_err());
    }

    #[test]
    fn fitting_group_count_divides() {
        assert_eq!(fitting_group_count(8, 8), 8);
        assert_eq!(fitting_group_count(12, 8), 6);
        assert_eq!(fitting_group_count(2, 8), 2);
        assert_eq!(fitting_group_count(5, 8), 5);
        assert_eq!(fitting_group_count(7, 4), 1);
    }
}
