use alloc::vec::Vec;

use super::{mode_product, mode_unfold, Kernel4};
use crate::linalg::{complete_basis, svd, Matrix};
use crate::{Axis, Error, Result, Tensor};

/// Orthogonal mode matrices plus core of a kernel, `A = S x1 U1^T x2 U2^T x3 U3^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HosvdFactors {
    /// `U^(k)` of shape `I_k x J_k` with orthonormal rows.
    pub mode_matrices: [Matrix; 3],
    /// `I1 x I2 x I3 x C`.
    pub core: Tensor,
    /// Singular values of each mode unfolding, padded with zeros to `J_k`.
    pub mode_singular_values: [Vec<f64>; 3],
}

impl HosvdFactors {
    pub fn ranks(&self) -> [usize; 3] {
        core::array::from_fn(|k| self.mode_matrices[k].rows())
    }

    pub fn extents(&self) -> [usize; 3] {
        core::array::from_fn(|k| self.mode_matrices[k].cols())
    }

    pub fn channels(&self) -> usize {
        self.core.shape()[3]
    }

    pub fn reconstruct(&self) -> Kernel4 {
        let mut t = self.core.clone();
        for k in 0..3 {
            t = mode_product(&t, k, &self.mode_matrices[k].transpose());
        }
        Kernel4(t)
    }
}

fn mode_bases(kernel: &Kernel4) -> Result<[(Matrix, Vec<f64>); 3]> {
    let mut out: [(Matrix, Vec<f64>); 3] = Default::default();
    for axis in Axis::ALL {
        let unfolded = mode_unfold(kernel, axis);
        let j = unfolded.rows();
        let dec = svd(&unfolded)?;
        let mut sv = dec.s.clone();
        sv.resize(j, 0.0);
        // rows of U^(k) are the left singular vectors
        out[axis.index()] = (complete_basis(&dec.u).transpose(), sv);
    }
    Ok(out)
}

fn project(kernel: &Kernel4, mats: &[Matrix; 3]) -> Tensor {
    let mut core = kernel.tensor().clone();
    for (k, m) in mats.iter().enumerate() {
        core = mode_product(&core, k, m);
    }
    core
}

/// Full-rank HOSVD over the three spatial modes (`I_k = J_k`).
pub fn hosvd(kernel: &Kernel4) -> Result<HosvdFactors> {
    let [(u1, s1), (u2, s2), (u3, s3)] = mode_bases(kernel)?;
    let mode_matrices = [u1, u2, u3];
    let core = project(kernel, &mode_matrices);
    Ok(HosvdFactors { mode_matrices, core, mode_singular_values: [s1, s2, s3] })
}

/// HOSVD keeping the leading `ranks[k]` singular vectors of each mode.
///
/// Returns the factors and the Frobenius-relative reconstruction error
/// (absolute when the kernel is zero).
pub fn truncated_decompose(kernel: &Kernel4, ranks: [usize; 3]) -> Result<(HosvdFactors, f64)> {
    let extents = kernel.extents();
    for k in 0..3 {
        if ranks[k] == 0 || ranks[k] > extents[k] {
            return Err(Error::RankOutOfRange { mode: k + 1, rank: ranks[k], extent: extents[k] });
        }
    }
    let full = hosvd(kernel)?;
    let mode_matrices: [Matrix; 3] = core::array::from_fn(|k| full.mode_matrices[k].top_rows(ranks[k]));
    let core = project(kernel, &mode_matrices);
    let factors = HosvdFactors { mode_matrices, core, mode_singular_values: full.mode_singular_values };
    let err = factors.reconstruct().tensor().rel_frob_diff(kernel.tensor());
    Ok((factors, err))
}
