//! Dense N-dimensional tensors and the reverse-mode tape.
//!
//! Field data uses the `[batch, channels, height, width]` layout throughout;
//! 1D problems are carried as 4-D tensors with `height == 1`.

mod ops;
mod tape;

pub use tape::{Tape, VarId};

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{FinoError, Result};

/// Element type tag used by the on-disk formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Floating-point element of a [`Tensor`].
///
/// Training typically runs at `f32`; tests and oracles use `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// Convert an `f64` literal or intermediate into the tensor element type.
#[inline]
pub fn scalar<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("f64 must convert into the element type")
}

/// How convolutions treat samples outside the spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Wrap indices modulo the spatial extent (torus).
    Periodic,
    /// Treat out-of-range samples as zero.
    Zero,
}

/// Dense row-major tensor of floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(FinoError::InvalidArgument(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FinoError::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![scalar(value); numel],
            requires_grad: false,
        }
    }

    /// Rank-0-like scalar carrier, stored as shape `[1]`.
    pub fn from_scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| scalar(v)).collect())
    }

    /// Flag this tensor as a differentiable parameter when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// View the shape as `(batch, channels, height, width)`.
    pub fn dims4(&self, context: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(FinoError::InvalidArgument(format!(
                "{context}: expected a rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Contiguous `[height * width]` plane of a rank-4 tensor.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[E] {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        &self.data[(b * ch + c) * hw..][..hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [E] {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        &mut self.data[(b * ch + c) * hw..][..hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|v| v.to_f64().expect("element converts to f64"))
            .collect()
    }

    /// Elementwise in-place addition; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// The sole element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(FinoError::NonScalarLoss {
                numel: self.numel(),
            });
        }
        Ok(self.data[0].to_f64().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_extent_product() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn plane_views_are_contiguous() {
        let t = Tensor::<f64>::new(vec![2, 3, 2, 2], (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.plane(0, 0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.plane(1, 2), &[20.0, 21.0, 22.0, 23.0]);
    }
}
