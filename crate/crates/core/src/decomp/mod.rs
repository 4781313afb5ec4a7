//! Decomposition of 3D convolution kernels into sums of separable kernels.
//!
//! A single output filter of a 3D convolution is a [`Kernel4`] of shape
//! `J1 x J2 x J3 x C`. [`hosvd`] factors it into three orthogonal mode
//! matrices and a core tensor (the channel mode is left alone). Splitting the
//! core into slabs, each supported on one index along one spatial mode, turns
//! every slab into a [`SeparableKernel`]: a 1D vector along that mode
//! convolved with a planar sub-kernel. Summing the slabs gives back the
//! original kernel, and grouping them by mode gives up to three streams of
//! 2D-then-1D convolutions with different orientations.

mod hosvd;
mod separable;
mod slab;

use alloc::format;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::{Axis, Error, Result, Tensor};

pub use hosvd::{hosvd, truncated_decompose, HosvdFactors};
pub use separable::{fuse_consecutive, verify_separable_chain, ChainCheck, FusedChain, SeparableKernel};
pub use slab::{default_assignment, slab_decompose, Slab, SlabAssignment};

/// One output filter of a 3D convolution: `J1 x J2 x J3 x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4(Tensor);

impl Kernel4 {
    pub fn new(tensor: Tensor) -> Result<Kernel4> {
        if tensor.rank() != 4 {
            return Err(Error::InvalidShape(format!(
                "a kernel must be J1 x J2 x J3 x C, got shape {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFinite("kernel entries".into()));
        }
        Ok(Kernel4(tensor))
    }

    pub fn zeros(extents: [usize; 3], channels: usize) -> Kernel4 {
        Kernel4(Tensor::zeros(&[extents[0], extents[1], extents[2], channels]))
    }

    /// Filter `out` of a convolution weight tensor `[C_out, C_in, J1, J2, J3]`.
    pub fn from_conv_weights(weights: &Tensor, out: usize) -> Result<Kernel4> {
        let [o, c, j1, j2, j3] = weights.dims5("Kernel4::from_conv_weights")?;
        if out >= o {
            return Err(Error::mismatch("Kernel4::from_conv_weights", format!("filter {out} of {o}")));
        }
        Ok(Kernel4(Tensor::from_fn(&[j1, j2, j3, c], |i| weights.get(&[out, i[3], i[0], i[1], i[2]]))))
    }

    /// Single-filter weight tensor `[1, C, J1, J2, J3]`.
    pub fn to_conv_weights(&self) -> Tensor {
        let [j1, j2, j3] = self.extents();
        Tensor::from_fn(&[1, self.channels(), j1, j2, j3], |i| self.0.get(&[i[2], i[3], i[4], i[1]]))
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Matricize along spatial `mode`: rows are indexed by that mode, columns by
/// the remaining indices (channel last) in row-major order.
pub fn mode_unfold(kernel: &Kernel4, mode: Axis) -> Matrix {
    unfold(kernel.tensor(), mode.index())
}

/// Inverse of [`mode_unfold`] for a kernel of the given shape.
pub fn mode_fold(matrix: &Matrix, mode: Axis, extents: [usize; 3], channels: usize) -> Result<Kernel4> {
    let shape = [extents[0], extents[1], extents[2], channels];
    Kernel4::new(fold(matrix, mode.index(), &shape)?)
}

fn column_index(idx: &[usize], shape: &[usize], mode: usize) -> usize {
    let mut col = 0;
    for (d, (&i, &n)) in idx.iter().zip(shape).enumerate() {
        if d != mode {
            col = col * n + i;
        }
    }
    col
}

pub(crate) fn unfold(t: &Tensor, mode: usize) -> Matrix {
    let shape = t.shape();
    let rows = shape[mode];
    let cols = t.len() / rows;
    let mut m = Matrix::zeros(rows, cols);
    let mut idx = alloc::vec![0usize; shape.len()];
    for &v in t.data() {
        m.set(idx[mode], column_index(&idx, shape, mode), v);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    m
}

pub(crate) fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
    let total: usize = shape.iter().product();
    if mode >= shape.len() || m.rows() != shape[mode] || m.rows() * m.cols() != total {
        return Err(Error::mismatch(
            "fold",
            format!("{}x{} matrix does not fold into {shape:?} along mode {mode}", m.rows(), m.cols()),
        ));
    }
    Ok(Tensor::from_fn(shape, |idx| m.get(idx[mode], column_index(idx, shape, mode))))
}

/// `T x_mode P`: contracts `mode` of `t` against the columns of `p` (`out x in`).
pub(crate) fn mode_product(t: &Tensor, mode: usize, p: &Matrix) -> Tensor {
    let mut shape: Vec<usize> = t.shape().to_vec();
    assert_eq!(p.cols(), shape[mode], "mode_product: matrix does not match mode extent");
    let unfolded = unfold(t, mode);
    shape[mode] = p.rows();
    fold(&p.matmul(&unfolded), mode, &shape).expect("mode_product: consistent shapes")
}
