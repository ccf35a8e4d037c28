//! Bidirectional cross-attention (BiCA).
//!
//! Two calibrations share the same pair of inputs: the encoder-side feature
//! `O` (from the feature pyramid) is warped by a learned flow field, and the
//! decoder-side feature `Q` is scaled per channel by a mask learned from
//! stacked block means of both sources. The two results are summed point by
//! point.
//!
//! Channel attention path: both sources are block-pooled into
//! `(H/H0 * W/W0)` rows per channel, the two row stacks are concatenated to
//! `2 * (H/H0) * (W/W0)` rows and a learned 1x1 weighting collapses them into
//! one mask entry per channel.
//!
//! Spatial path: both sources are reduced by 1x1 convolutions, concatenated,
//! and pushed through parallel 3x3 and 5x5 convolutional branches whose
//! 2-channel outputs are summed into the flow field. Sampling coordinates are
//! `clamp(flow + grid, -1, 1)` over the identity grid.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::conv::Conv2dParams;
use crate::ops::norm::{fitting_group_count, GroupNormParams};
use crate::ops::resample::standard_grid_batched;
use crate::params::{InitKind, ParamDef, ParamNodes};
use crate::tensor::{Scalar, Tensor};

/// Block size used when pooling a feature map into its semantic-domain rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemanticDomainConfig {
    pub block_h: usize,
    pub block_w: usize,
}

impl SemanticDomainConfig {
    pub fn square(block: usize) -> Self {
        SemanticDomainConfig { block_h: block, block_w: block }
    }
}

/// How the channel mask is activated before scaling `Q`.
///
/// `Sigmoid` bounds scales to (0, 1) and is the training default; `Linear`
/// leaves the learned weighting raw (useful for identity contrivances).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskActivation {
    #[default]
    Sigmoid,
    Linear,
}

/// Static shape of one BiCA junction.
#[derive(Debug, Clone)]
pub struct BicaConfig {
    pub channels: usize,
    pub feature_h: usize,
    pub feature_w: usize,
    pub semantic: SemanticDomainConfig,
    pub mask_activation: MaskActivation,
}

impl BicaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.semantic.block_h == 0
            || self.semantic.block_w == 0
            || self.feature_h % self.semantic.block_h != 0
            || self.feature_w % self.semantic.block_w != 0
        {
            return Err(Error::config(format!(
                "bica: blocks {}x{} do not divide the {}x{} feature extent",
                self.semantic.block_h, self.semantic.block_w, self.feature_h, self.feature_w
            )));
        }
        Ok(())
    }

    /// Rows per source after block pooling and flattening.
    pub fn rows(&self) -> usize {
        (self.feature_h / self.semantic.block_h) * (self.feature_w / self.semantic.block_w)
    }

    fn reduced_channels(&self) -> usize {
        (self.channels / 2).max(1)
    }

    /// Learnable tensors of one junction, named under `prefix`.
    pub fn param_defs(&self, prefix: &str) -> Vec<ParamDef> {
        let c = self.channels;
        let r = self.reduced_channels();
        let cat = 2 * r;
        let rows2 = 2 * self.rows();
        let mut defs = vec![
            // Channel-mask weighting over the stacked rows; no bias.
            ParamDef::new(
                format!("{prefix}ca.weight"),
                &[1, rows2, 1, 1],
                InitKind::FanInUniform { fan_in: rows2 },
            ),
        ];
        // Convolutions feeding a group norm are biasless (the normalization
        // would cancel the offset, leaving a dead parameter).
        for side in ["reduce_o", "reduce_q"] {
            defs.push(ParamDef::new(
                format!("{prefix}flow.{side}.conv.weight"),
                &[r, c, 1, 1],
                InitKind::FanInUniform { fan_in: c },
            ));
            defs.push(ParamDef::new(format!("{prefix}flow.{side}.gn.gamma"), &[r], InitKind::Ones));
            defs.push(ParamDef::new(format!("{prefix}flow.{side}.gn.beta"), &[r], InitKind::Zeros));
        }
        for (branch, k) in [("b3", 3usize), ("b5", 5usize)] {
            defs.push(ParamDef::new(
                format!("{prefix}flow.{branch}.conv1.weight"),
                &[cat, cat, k, k],
                InitKind::FanInUniform { fan_in: cat * k * k },
            ));
            defs.push(ParamDef::new(
                format!("{prefix}flow.{branch}.gn1.gamma"),
                &[cat],
                InitKind::Ones,
            ));
            defs.push(ParamDef::new(
                format!("{prefix}flow.{branch}.gn1.beta"),
                &[cat],
                InitKind::Zeros,
            ));
            // Final 2-channel projections start at zero so training begins
            // from the identity warp.
            defs.push(ParamDef::new(
                format!("{prefix}flow.{branch}.conv2.weight"),
                &[2, cat, k, k],
                InitKind::Zeros,
            ));
            defs.push(ParamDef::new(
                format!("{prefix}flow.{branch}.conv2.bias"),
                &[2],
                InitKind::Zeros,
            ));
        }
        defs
    }
}

fn check_pair<T: Scalar>(
    g: &Graph<T>,
    o: NodeId,
    q: NodeId,
) -> Result<(usize, usize, usize, usize)> {
    let (vo, vq) = g.values2(o, q);
    if vo.shape() != vq.shape() {
        return Err(Error::shape(format!(
            "bica: O shape {:?} and Q shape {:?} differ",
            vo.shape(),
            vq.shape()
        )));
    }
    vo.dims4()
}

/// Block means of `x` flattened into rows: (B, C, H, W) -> (B, R, C, 1) with
/// `R = (H/H0) * (W/W0)` rows per channel.
pub fn semantic_domain<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    cfg: &SemanticDomainConfig,
) -> Result<NodeId> {
    let (b, c, _, _) = g.value(x).dims4()?;
    let pooled = g.block_mean(x, cfg.block_h, cfg.block_w)?;
    let (_, _, rh, rw) = g.value(pooled).dims4()?;
    let rows = g.permute_bhwc(pooled)?;
    g.reshape(rows, &[b, rh * rw, c, 1])
}

/// Rows of `O` stacked over rows of `Q`, shape (B, 2R, C, 1).
pub fn stacked_block_means<T: Scalar>(
    g: &mut Graph<T>,
    o: NodeId,
    q: NodeId,
    cfg: &SemanticDomainConfig,
) -> Result<NodeId> {
    let go = semantic_domain(g, o, cfg)?;
    let gq = semantic_domain(g, q, cfg)?;
    g.concat_ch(&[go, gq])
}

/// Scale each channel of `Q` by a mask learned from the stacked block means
/// of `O` and `Q`. Returns a tensor shaped like `Q`.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    o: NodeId,
    q: NodeId,
    nodes: &ParamNodes,
    prefix: &str,
    cfg: &BicaConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (b, c, h, w) = check_pair(g, o, q)?;
    if c != cfg.channels || h != cfg.feature_h || w != cfg.feature_w {
        return Err(Error::shape(format!(
            "bica: feature {b}x{c}x{h}x{w} does not match configured {}x{}x{}",
            cfg.channels, cfg.feature_h, cfg.feature_w
        )));
    }
    let stacked = stacked_block_means(g, o, q, &cfg.semantic)?;
    let weight = param(nodes, prefix, "ca.weight")?;
    let zero_bias = g.constant(Tensor::zeros(&[1])?);
    let pre = g.conv2d(stacked, weight, zero_bias, Conv2dParams::default())?;
    let mask_rows = match cfg.mask_activation {
        MaskActivation::Sigmoid => g.sigmoid(pre)?,
        MaskActivation::Linear => pre,
    };
    let mask = g.reshape(mask_rows, &[b, c, 1, 1])?;
    g.mul_channel_mask(q, mask)
}

/// Estimate the 2-channel flow field between `O` and `Q`,
/// shape (B, H, W, 2) with channel 0 vertical and channel 1 horizontal.
pub fn flow_estimate<T: Scalar>(
    g: &mut Graph<T>,
    o: NodeId,
    q: NodeId,
    nodes: &ParamNodes,
    prefix: &str,
) -> Result<NodeId> {
    check_pair(g, o, q)?;
    let ro = reduce(g, o, nodes, prefix, "reduce_o")?;
    let rq = reduce(g, q, nodes, prefix, "reduce_q")?;
    let cat = g.concat_ch(&[ro, rq])?;
    let f3 = flow_branch(g, cat, nodes, prefix, "b3")?;
    let f5 = flow_branch(g, cat, nodes, prefix, "b5")?;
    let flow = g.add(f3, f5)?;
    g.permute_bhwc(flow)
}

fn reduce<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    nodes: &ParamNodes,
    prefix: &str,
    side: &str,
) -> Result<NodeId> {
    let w = param(nodes, prefix, &format!("flow.{side}.conv.weight"))?;
    let gamma = param(nodes, prefix, &format!("flow.{side}.gn.gamma"))?;
    let beta = param(nodes, prefix, &format!("flow.{side}.gn.beta"))?;
    let oc = g.value(w).shape()[0];
    let zero_bias = g.constant(Tensor::zeros(&[oc])?);
    let y = g.conv2d(x, w, zero_bias, Conv2dParams::default())?;
    let c = g.value(y).shape()[1];
    let y = g.group_norm(
        y,
        gamma,
        beta,
        GroupNormParams { groups: fitting_group_count(c, 8), ..Default::default() },
    )?;
    g.relu(y)
}

fn flow_branch<T: Scalar>(
    g: &mut Graph<T>,
    cat: NodeId,
    nodes: &ParamNodes,
    prefix: &str,
    branch: &str,
) -> Result<NodeId> {
    let w1 = param(nodes, prefix, &format!("flow.{branch}.conv1.weight"))?;
    let gamma = param(nodes, prefix, &format!("flow.{branch}.gn1.gamma"))?;
    let beta = param(nodes, prefix, &format!("flow.{branch}.gn1.beta"))?;
    let w2 = param(nodes, prefix, &format!("flow.{branch}.conv2.weight"))?;
    let b2 = param(nodes, prefix, &format!("flow.{branch}.conv2.bias"))?;
    let oc1 = g.value(w1).shape()[0];
    let zero_bias = g.constant(Tensor::zeros(&[oc1])?);
    let y = g.conv2d(cat, w1, zero_bias, Conv2dParams::default())?;
    let c = g.value(y).shape()[1];
    let y = g.group_norm(
        y,
        gamma,
        beta,
        GroupNormParams { groups: fitting_group_count(c, 8), ..Default::default() },
    )?;
    let y = g.relu(y)?;
    g.conv2d(y, w2, b2, Conv2dParams::default())
}

/// Warp `O` by a flow field: sample at `clamp(flow + grid, -1, 1)`.
pub fn flow_warp<T: Scalar>(g: &mut Graph<T>, o: NodeId, flow: NodeId) -> Result<NodeId> {
    let (b, _, h, w) = g.value(o).dims4()?;
    let fs = g.value(flow).shape();
    if fs != [b, h, w, 2] {
        return Err(Error::shape(format!(
            "flow_warp: flow shape {fs:?} does not match feature ({b}, {h}, {w}, 2)"
        )));
    }
    let grid = g.constant(standard_grid_batched::<T>(b, h, w)?);
    let raw = g.add(flow, grid)?;
    let coords = g.clamp(raw, -1.0, 1.0)?;
    g.sample_bilinear_normalized(o, coords)
}

/// Full junction: warp `O` by the estimated flow, scale `Q` by the channel
/// mask, and sum the two calibrated features point by point.
pub fn bica_fuse<T: Scalar>(
    g: &mut Graph<T>,
    o: NodeId,
    q: NodeId,
    nodes: &ParamNodes,
    prefix: &str,
    cfg: &BicaConfig,
) -> Result<NodeId> {
    let flow = flow_estimate(g, o, q, nodes, prefix)?;
    let warped = flow_warp(g, o, flow)?;
    let scaled = channel_attention(g, o, q, nodes, prefix, cfg)?;
    g.add(warped, scaled)
}

fn param(nodes: &ParamNodes, prefix: &str, name: &str) -> Result<NodeId> {
    let full = format!("{prefix}{name}");
    nodes
        .get(&full)
        .copied()
        .ok_or_else(|| Error::contract(format!("missing parameter {full:?}")))
}
