//! Differentiable operators.
//!
//! Each submodule provides the forward kernel(s), a method on [`Graph`] that
//! records the op, and the backward rule. `backward_op` dispatches one node's
//! backward during the reverse sweep.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod resample;

pub use conv::{Conv2dAttrs, Padding};
pub use resample::standard_grid;

use crate::error::Result;
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Scalar, Tensor};

/// Elementwise op kinds exposed by the public `elementwise` entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

/// Compute the gradient contributions of one node to its inputs.
pub(crate) fn backward_op<T: Scalar>(
    g: &Graph<T>,
    id: NodeId,
    upstream: &Tensor<T>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let node = &g.nodes[id.index()];
    match &node.op {
        Op::Leaf => Ok(vec![]),
        Op::Add(a, b) => elementwise::backward_add(*a, *b, upstream),
        Op::Sub(a, b) => elementwise::backward_sub(*a, *b, upstream),
        Op::Mul(a, b) => elementwise::backward_mul(g, *a, *b, upstream),
        Op::Div(a, b) => elementwise::backward_div(g, *a, *b, upstream),
        Op::Scale(a, s) => elementwise::backward_scale(*a, *s, upstream),
        Op::AddScalar(a, _) => Ok(vec![(*a, upstream.clone())]),
        Op::Relu(a) => elementwise::backward_relu(g, *a, upstream),
        Op::Clamp(a, lo, hi) => elementwise::backward_clamp(g, *a, *lo, *hi, upstream),
        Op::Sigmoid(a) => elementwise::backward_sigmoid(g, *a, id, upstream),
        Op::Log(a) => elementwise::backward_log(g, *a, upstream),
        Op::SoftmaxCh(a) => elementwise::backward_softmax_ch(g, *a, id, upstream),
        Op::LogSoftmaxCh(a) => elementwise::backward_log_softmax_ch(g, *a, id, upstream),
        Op::Conv2d { input, weight, bias, attrs } => {
            conv::backward(g, *input, *weight, *bias, attrs, upstream)
        }
        Op::GroupNorm { input, gamma, beta, groups, eps } => {
            norm::backward(g, *input, *gamma, *beta, *groups, *eps, id, upstream)
        }
        Op::UpsampleBilinear { input, factor } => {
            resample::backward_upsample(g, *input, *factor, upstream)
        }
        Op::BlockMean { input, block_h, block_w } => {
            resample::backward_block_mean(g, *input, *block_h, *block_w, upstream)
        }
        Op::SampleBilinear { input, coords } => {
            resample::backward_sample(g, *input, *coords, upstream)
        }
        Op::ConcatCh(ids) => elementwise::backward_concat_ch(g, ids, upstream),
        Op::PermuteBhwc(a) => elementwise::backward_permute_bhwc(g, *a, upstream),
        Op::Reshape(a) => {
            let shape = g.value(*a).shape().to_vec();
            let grad = Tensor::from_vec(&shape, upstream.clone().into_data())?;
            Ok(vec![(*a, grad)])
        }
        Op::MulChannelMask { input, mask } => {
            elementwise::backward_mul_channel_mask(g, *input, *mask, upstream)
        }
        Op::SumAll(a) => elementwise::backward_sum_all(g, *a, upstream),
        Op::SumPerChannel(a) => elementwise::backward_sum_per_channel(g, *a, upstream),
    }
}
