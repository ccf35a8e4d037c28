//! Named learnable tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Ordered mapping from parameter name to tensor. Iteration order is the
/// sorted name order, which makes serialization and optimizer traversal
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

/// Node ids of registered parameters inside one [`Graph`].
pub type ParamNodes = BTreeMap<String, NodeId>;

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.map.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect(),
        }
    }

    /// Register every parameter as a named differentiable leaf of `graph`.
    pub fn register(&self, graph: &mut Graph<T>) -> ParamNodes {
        self.map
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.parameter(name, tensor.clone())))
            .collect()
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParameterSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParameterSet { map: iter.into_iter().collect() }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform on ±sqrt(3 / fan_in), i.e. variance 1 / fan_in.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Declared shape and initializer of one learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, shape: &[usize], init: InitKind) -> Self {
        ParamDef { name: name.into(), shape: shape.to_vec(), init }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-parameter RNG seed derived from the run seed and the parameter name,
/// so initialization does not depend on creation order.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a(name.as_bytes()))
}

/// Materialize a parameter set from its definitions. Values are drawn in
/// `f64` and narrowed, so `f32` parameters are the narrowing of the `f64`
/// ones for the same seed.
pub fn init_parameters<T: Scalar>(defs: &[ParamDef], seed: u64) -> Result<ParameterSet<T>> {
    let mut set = ParameterSet::new();
    for def in defs {
        let tensor = match def.init {
            InitKind::Zeros => Tensor::zeros(&def.shape)?,
            InitKind::Ones => Tensor::full(&def.shape, T::one())?,
            InitKind::FanInUniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::config(format!("{}: zero fan-in", def.name)));
                }
                let bound = (3.0 / fan_in as f64).sqrt();
                Tensor::rand_uniform(&def.shape, -bound, bound, param_seed(seed, &def.name))?
            }
        };
        set.insert(def.name.clone(), tensor)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn empty_set_has_zero_parameters() {
        assert_eq!(ParameterSet::<f32>::new().param_count(), 0);
    }

    #[test]
    fn param_count_sums_scalars() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("conv.weight", Tensor::zeros(&[8, 1, 3, 3]).unwrap()).unwrap();
        p.insert("conv.bias", Tensor::zeros(&[8]).unwrap()).unwrap();
        assert_eq!(p.param_count(), 8 * 9 + 8);
    }
}
