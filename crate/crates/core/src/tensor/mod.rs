//! Dense tensors and the convolution primitives every other module is built on.
//!
//! Activations use the `[batch, channel, d1, d2, d3]` layout, `d1` being the
//! temporal (or z) axis. Convolutions are cross-correlations with zero padding.

mod conv;
mod gradcheck;
mod ops;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::{Error, Result};

pub use conv::{conv_backward, conv_forward, ConvGrads, ConvKind, ConvSpec};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use ops::{
    add, concat_channels, maxpool3d, maxpool3d_backward, relu_backward, relu_forward, split_channels, upsample_nearest,
    upsample_nearest_backward,
};

/// One of the three spatial axes of a volume (`d1`, `d2`, `d3`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    D1,
    D2,
    D3,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::D1, Axis::D2, Axis::D3];

    /// Zero-based position among the spatial axes.
    pub const fn index(self) -> usize {
        match self {
            Axis::D1 => 0,
            Axis::D2 => 1,
            Axis::D3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }

    /// The two spatial axes other than `self`, in increasing order.
    pub const fn others(self) -> [Axis; 2] {
        match self {
            Axis::D1 => [Axis::D2, Axis::D3],
            Axis::D2 => [Axis::D1, Axis::D3],
            Axis::D3 => [Axis::D1, Axis::D2],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.index() + 1)
    }
}

/// Dense row-major array of `f64` with a fixed shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one dimension".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("dimension {pos} has extent 0 in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let len = check_shape(shape).expect("Tensor::full: invalid shape");
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Flat offset of a multi-index. Panics when out of range.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of range for dimension {i} (extent {d})");
            off = off * d + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Shape as `[n, c, d1, d2, d3]`, or an error naming `op`.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| Error::mismatch(op, format!("expected a rank-5 tensor [N,C,D1,D2,D3], got {:?}", self.shape)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::mismatch("zip_with", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, k: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch("add_scaled", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| f64::max(m, math::abs(v)))
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (&a, &b)| f64::max(m, math::abs(a - b)))
    }

    /// `||self - other|| / ||other||`, or the absolute norm when `other` is zero.
    pub fn rel_frob_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        let diff: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let denom = other.norm();
        if denom == 0.0 {
            math::sqrt(diff)
        } else {
            math::sqrt(diff) / denom
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor::from_fn(&[2, 3], |i| (i[0] * 10 + i[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.get(&[1, 2]), 12.0);
    }

    #[test]
    fn axis_others() {
        assert_eq!(Axis::D2.others(), [Axis::D1, Axis::D3]);
        assert_eq!(Axis::from_index(2), Some(Axis::D3));
        assert_eq!(Axis::from_index(3), None);
    }
}
