use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{mode_product, HosvdFactors, SeparableKernel};
use crate::{math, Axis, Error, Result, Tensor};

/// One core slice: every core entry whose index along `axis` equals `index`
/// (zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slab {
    pub axis: Axis,
    pub index: usize,
}

/// Ordered list of core slices. Each core entry belongs to the first listed
/// slab whose slice contains it, so the slab pieces partition the core.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SlabAssignment {
    pub entries: Vec<Slab>,
}

/// Core entries at or below this fraction of the largest magnitude count as zero.
const NEGLIGIBLE: f64 = 1e-12;

fn core_dims(core: &Tensor) -> [usize; 4] {
    let s = core.shape();
    [s[0], s[1], s[2], s[3]]
}

fn spatial_index(flat: usize, dims: [usize; 4]) -> [usize; 3] {
    let rest = flat / dims[3];
    [rest / (dims[1] * dims[2]), (rest / dims[2]) % dims[1], rest % dims[2]]
}

impl SlabAssignment {
    pub fn new(entries: Vec<Slab>) -> SlabAssignment {
        SlabAssignment { entries }
    }

    /// Every slice of one mode.
    pub fn along(axis: Axis, extent: usize) -> SlabAssignment {
        SlabAssignment { entries: (0..extent).map(|index| Slab { axis, index }).collect() }
    }

    /// For each core entry, the position of the slab that owns it.
    fn owners(&self, core: &Tensor) -> Result<Vec<Option<usize>>> {
        let dims = core_dims(core);
        for (pos, s) in self.entries.iter().enumerate() {
            if s.index >= dims[s.axis.index()] {
                return Err(Error::InvalidAssignment(format!(
                    "slab {pos} selects index {} along {} but the core has extent {}",
                    s.index,
                    s.axis,
                    dims[s.axis.index()]
                )));
            }
            if self.entries[..pos].contains(s) {
                return Err(Error::InvalidAssignment(format!(
                    "slice {} index {} is assigned more than once",
                    s.axis, s.index
                )));
            }
        }
        let threshold = core.max_abs() * NEGLIGIBLE;
        let mut owners = vec![None; core.len()];
        for (flat, &v) in core.data().iter().enumerate() {
            let idx = spatial_index(flat, dims);
            owners[flat] = self.entries.iter().position(|s| idx[s.axis.index()] == s.index);
            if owners[flat].is_none() && math::abs(v) > threshold {
                return Err(Error::InvalidAssignment(format!(
                    "core entry {:?} (value {v:e}) is not covered by any slab",
                    idx
                )));
            }
        }
        Ok(owners)
    }

    /// The slab pieces `S^l`, each zero outside its own slice.
    pub fn pieces(&self, core: &Tensor) -> Result<Vec<Tensor>> {
        let owners = self.owners(core)?;
        let mut pieces = vec![Tensor::zeros(core.shape()); self.entries.len()];
        for (flat, owner) in owners.into_iter().enumerate() {
            if let Some(l) = owner {
                pieces[l].data_mut()[flat] = core.data()[flat];
            }
        }
        Ok(pieces)
    }

    /// Slab positions grouped by axis (the three stream groups).
    pub fn groups(&self) -> [Vec<usize>; 3] {
        let mut g: [Vec<usize>; 3] = Default::default();
        for (l, s) in self.entries.iter().enumerate() {
            g[s.axis.index()].push(l);
        }
        g
    }
}

/// Round-robin over the three modes, taking slices in order of decreasing
/// mode singular value, until the core is covered. Slices that would own no
/// significant entry are skipped.
pub fn default_assignment(factors: &HosvdFactors) -> SlabAssignment {
    let core = &factors.core;
    let dims = core_dims(core);
    let threshold = core.max_abs() * NEGLIGIBLE;
    let significant: Vec<usize> = (0..core.len()).filter(|&i| math::abs(core.data()[i]) > threshold).collect();
    let mut covered = vec![false; core.len()];
    let mut remaining = significant.len();
    let mut entries = Vec::new();
    let ranks = factors.ranks();
    let mut round = 0;
    while remaining > 0 && round < ranks.iter().copied().max().unwrap_or(0) {
        for axis in Axis::ALL {
            if remaining == 0 || round >= ranks[axis.index()] {
                continue;
            }
            let slab = Slab { axis, index: round };
            let mut claimed = 0;
            for &flat in &significant {
                if !covered[flat] && spatial_index(flat, dims)[axis.index()] == round {
                    covered[flat] = true;
                    claimed += 1;
                }
            }
            if claimed > 0 {
                entries.push(slab);
                remaining -= claimed;
            }
        }
        round += 1;
    }
    SlabAssignment { entries }
}

/// One separable kernel per slab; their sum reconstructs the decomposed kernel.
pub fn slab_decompose(factors: &HosvdFactors, assignment: &SlabAssignment) -> Result<Vec<SeparableKernel>> {
    let pieces = assignment.pieces(&factors.core)?;
    let mut out = Vec::with_capacity(pieces.len());
    for (slab, piece) in assignment.entries.iter().zip(pieces) {
        let a = slab.axis.index();
        let u = &factors.mode_matrices[a];
        let mut slice_shape = piece.shape().to_vec();
        slice_shape[a] = 1;
        let mut rest = Tensor::from_fn(&slice_shape, |i| {
            let mut full = [i[0], i[1], i[2], i[3]];
            full[a] = slab.index;
            piece.get(&full)
        });
        for other in slab.axis.others() {
            rest = mode_product(&rest, other.index(), &factors.mode_matrices[other.index()].transpose());
        }
        let vec = Tensor::from_vec(&[u.cols()], u.row(slab.index).to_vec())?;
        out.push(SeparableKernel::new(slab.axis, vec, rest)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{hosvd, Kernel4};
    use crate::rng;

    fn sum_of(parts: &[SeparableKernel], shape: &[usize]) -> Tensor {
        let mut acc = Tensor::zeros(shape);
        for p in parts {
            acc.add_scaled(1.0, p.compose().tensor()).unwrap();
        }
        acc
    }

    #[test]
    fn rank_one_single_slab() {
        let (a, b, c) = ([1.0, 2.0, -1.0], [0.5, -0.5, 1.0], [2.0, 1.0, 0.0]);
        let k = Kernel4::new(Tensor::from_fn(&[3, 3, 3, 1], |i| a[i[0]] * b[i[1]] * c[i[2]])).unwrap();
        let f = hosvd(&k).unwrap();
        let assignment = SlabAssignment::new(vec![Slab { axis: Axis::D1, index: 0 }]);
        let parts = slab_decompose(&f, &assignment).unwrap();
        assert_eq!(parts.len(), 1);
        assert!(parts[0].compose().tensor().rel_frob_diff(k.tensor()) < 1e-12);
        assert_eq!(default_assignment(&f), assignment);
    }

    #[test]
    fn mixed_orientation_assignment() {
        let mut r = rng::seeded(31);
        let k = Kernel4::new(rng::uniform(&mut r, &[3, 3, 3, 1], -1.0, 1.0)).unwrap();
        let f = hosvd(&k).unwrap();
        let mut entries = vec![Slab { axis: Axis::D1, index: 0 }];
        entries.extend((0..3).map(|index| Slab { axis: Axis::D2, index }));
        entries.extend((0..3).map(|index| Slab { axis: Axis::D3, index }));
        let parts = slab_decompose(&f, &SlabAssignment::new(entries)).unwrap();
        assert_eq!(parts.len(), 7);
        assert!(sum_of(&parts, &[3, 3, 3, 1]).rel_frob_diff(k.tensor()) < 1e-10);
        for p in &parts {
            assert_eq!(p.rest.shape()[p.axis.index()], 1);
        }
    }

    #[test]
    fn incomplete_or_repeated_assignments_are_rejected() {
        let mut r = rng::seeded(37);
        let k = Kernel4::new(rng::uniform(&mut r, &[3, 3, 3, 1], -1.0, 1.0)).unwrap();
        let f = hosvd(&k).unwrap();
        let missing = SlabAssignment::new((0..2).map(|index| Slab { axis: Axis::D1, index }).collect());
        assert!(matches!(slab_decompose(&f, &missing), Err(Error::InvalidAssignment(_))));
        let repeated = SlabAssignment::new(vec![
            Slab { axis: Axis::D1, index: 0 },
            Slab { axis: Axis::D1, index: 1 },
            Slab { axis: Axis::D1, index: 2 },
            Slab { axis: Axis::D1, index: 2 },
        ]);
        assert!(slab_decompose(&f, &repeated).is_err());
        let out_of_range = SlabAssignment::new(vec![Slab { axis: Axis::D3, index: 3 }]);
        assert!(slab_decompose(&f, &out_of_range).is_err());
    }

    #[test]
    fn default_assignment_uses_all_three_orientations() {
        let mut r = rng::seeded(41);
        let k = Kernel4::new(rng::uniform(&mut r, &[3, 3, 3, 2], -1.0, 1.0)).unwrap();
        let f = hosvd(&k).unwrap();
        let a = default_assignment(&f);
        assert_eq!(
            &a.entries[..3],
            &[Slab { axis: Axis::D1, index: 0 }, Slab { axis: Axis::D2, index: 0 }, Slab { axis: Axis::D3, index: 0 },]
        );
        assert!(a.groups().iter().all(|g| !g.is_empty()));
        let parts = slab_decompose(&f, &a).unwrap();
        assert!(sum_of(&parts, &[3, 3, 3, 2]).rel_frob_diff(k.tensor()) < 1e-10);
    }

    #[test]
    fn zero_kernel_needs_no_slabs() {
        let f = hosvd(&Kernel4::zeros([2, 2, 2], 1)).unwrap();
        let a = default_assignment(&f);
        assert!(a.entries.is_empty());
        assert!(slab_decompose(&f, &a).unwrap().is_empty());
    }
}
