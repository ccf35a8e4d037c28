//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! Forward operations append nodes to a [`Graph`]; every node stores its value,
//! the op kind with input node ids, and whatever the backward rule needs.
//! Nodes are appended in execution order, so ids are already a topological
//! order and the backward sweep is a single reverse pass. Gradients fan in by
//! summation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::conv::Conv2dAttrs;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// Recorded operation. Scalar attributes are kept in `f64` and narrowed when
/// applied, so the record is dtype-independent.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    #[allow(dead_code)] // addend kept so the record fully describes the op
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    /// Softmax over the channel axis of a BCHW tensor.
    SoftmaxCh(NodeId),
    /// Numerically stable log-softmax over the channel axis.
    LogSoftmaxCh(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, attrs: Conv2dAttrs },
    GroupNorm { input: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64 },
    UpsampleBilinear { input: NodeId, factor: usize },
    BlockMean { input: NodeId, block_h: usize, block_w: usize },
    SampleBilinear { input: NodeId, coords: NodeId },
    ConcatCh(Vec<NodeId>),
    /// BCHW -> BHWC move of the channel axis to the end.
    PermuteBhwc(NodeId),
    Reshape(NodeId),
    /// Elementwise product of a BCHW tensor with a per-channel B,C,1,1 mask.
    MulChannelMask { input: NodeId, mask: NodeId },
    SumAll(NodeId),
    /// BCHW -> [C], summing batch and spatial axes.
    SumPerChannel(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Clamp(a, _, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::SoftmaxCh(a)
            | Op::LogSoftmaxCh(a)
            | Op::PermuteBhwc(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::SumPerChannel(a) => vec![*a],
            Op::UpsampleBilinear { input, .. } | Op::BlockMean { input, .. } => vec![*input],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::GroupNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::SampleBilinear { input, coords } => vec![*input, *coords],
            Op::MulChannelMask { input, mask } => vec![*input, *mask],
            Op::ConcatCh(ids) => ids.clone(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub op: Op,
    /// Auxiliary tensors the backward rule needs beyond input/output values
    /// (e.g. group-norm normalized values and inverse stddevs).
    pub saved: Vec<Tensor<T>>,
    pub requires_grad: bool,
}

/// Gradients keyed by parameter name, shapes matching the parameters.
pub type GradientSet<T> = BTreeMap<String, Tensor<T>>;

/// Recorded forward tape plus parameter registry.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        op: Op,
        saved: Vec<Tensor<T>>,
    ) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|id| self.nodes[id.index()].requires_grad),
        };
        self.push_with_grad(value, op, saved, requires_grad)
    }

    fn push_with_grad(
        &mut self,
        value: Tensor<T>,
        op: Op,
        saved: Vec<Tensor<T>>,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op, saved, requires_grad });
        id
    }

    /// Insert a constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with_grad(value, Op::Leaf, vec![], false)
    }

    /// Insert a named learnable leaf. Gradients for it are collected by
    /// [`Graph::backward`] under this name.
    pub fn parameter(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.push_with_grad(value, Op::Leaf, vec![], true);
        self.params.push((name.to_string(), id));
        id
    }

    /// Insert an unnamed differentiable leaf (an input a test wants gradients
    /// for can instead be registered with [`Graph::parameter`]).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with_grad(value, Op::Leaf, vec![], true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.index()].value
    }

    pub(crate) fn values2(&self, a: NodeId, b: NodeId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.nodes[a.index()].value, &self.nodes[b.index()].value)
    }

    /// Reverse sweep from a scalar-shaped loss node. Returns one gradient per
    /// registered parameter; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet<T>> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out = GradientSet::new();
        for (name, id) in &self.params {
            let grad = match &node_grads[id.index()] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(*id).shape())?,
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    /// Backward returning per-node gradients (used by the op tests).
    pub(crate) fn backward_nodes(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        let loss_node = &self.nodes[loss.index()];
        if !loss_node.value.is_scalar_shaped() {
            return Err(Error::contract(format!(
                "backward requires a scalar-shaped loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(Tensor::full(loss_node.value.shape(), T::one())?);

        for idx in (0..=loss.index()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue, // not on a path from the loss
            };
            let contributions = crate::ops::backward_op(self, NodeId(idx as u32), &grad)?;
            for (input_id, contrib) in contributions {
                if !self.nodes[input_id.index()].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input_id.index()], contrib)?;
            }
            grads[idx] = Some(grad);
        }
        Ok(grads)
    }

    /// Gradient of the loss with respect to an arbitrary node (for tests).
    pub fn grad_of(&self, loss: NodeId, target: NodeId) -> Result<Tensor<T>> {
        let grads = self.backward_nodes(loss)?;
        match &grads[target.index()] {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(self.value(target).shape()),
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.shape() != contrib.shape() {
                return Err(Error::shape(format!(
                    "gradient fan-in shape mismatch: {:?} vs {:?}",
                    acc.shape(),
                    contrib.shape()
                )));
            }
            let mut summed = acc.clone().into_data();
            for (s, c) in summed.iter_mut().zip(contrib.data()) {
                *s = T::from_f64(s.to_f64() + c.to_f64());
            }
            *acc = Tensor::from_vec(contrib.shape(), summed)?;
        }
    }
    Ok(())
}
