//! Dense row-major tensor storage.
//!
//! Tensors are immutable once built (the graph produces new tensors instead of
//! mutating) and generic over the scalar type: training runs in `f32`, gradient
//! checking re-runs the identical graph in `f64`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar dtype tag, used by file formats and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Copy + PartialOrd + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense n-dimensional array, row-major, axis order (batch, channel, height,
/// width) wherever four axes are in play.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("empty shape"));
    }
    let mut n = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from an explicit buffer. The buffer length must equal the
    /// product of the extents.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fill shape {shape:?} ({n} elements)",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Uniform fill on `[lo, hi)`, reproducible from the seed. Values are drawn
    /// in `f64` and narrowed, so the `f32` tensor is the narrowing of the `f64`
    /// one for the same seed.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::config(format!("empty uniform range [{lo}, {hi})")));
        }
        let n = check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as 4-D (b, c, h, w). Errors when the rank is not 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::shape(format!("expected 4-D tensor, got shape {s:?}"))),
        }
    }

    pub fn is_scalar_shaped(&self) -> bool {
        self.numel() == 1
    }

    /// Convert elementwise to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill_produces_zeros() {
        let t = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
    }

    #[test]
    fn single_element_fill() {
        let t = Tensor::<f64>::full(&[1], 7.5).unwrap();
        assert_eq!(t.data(), &[7.5]);
    }

    #[test]
    fn seeded_fill_is_reproducible() {
        let a = Tensor::<f32>::rand_uniform(&[4, 4], -1.0, 1.0, 42).unwrap();
        let b = Tensor::<f32>::rand_uniform(&[4, 4], -1.0, 1.0, 42).unwrap();
        assert_eq!(a.data(), b.data(), "same seed must give bit-identical buffers");
        let c = Tensor::<f32>::rand_uniform(&[4, 4], -1.0, 1.0, 43).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::zeros(&[2, 0, 3]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn buffer_length_must_match_shape() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn f32_cast_of_f64_draw_matches_f32_draw() {
        let a = Tensor::<f64>::rand_uniform(&[8], -2.0, 2.0, 7).unwrap();
        let b = Tensor::<f32>::rand_uniform(&[8], -2.0, 2.0, 7).unwrap();
        assert_eq!(a.cast::<f32>().data(), b.data());
    }
}
