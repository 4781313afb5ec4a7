use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Kernel4;
use crate::tensor::conv_forward;
use crate::{Axis, ConvSpec, Error, Result, Tensor};

/// A kernel written as a 1D vector along `axis` convolved with a sub-kernel
/// `rest` that has extent 1 along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    pub axis: Axis,
    /// Length `J_axis`.
    pub vec: Tensor,
    /// `J1 x J2 x J3 x C` with extent 1 along `axis`.
    pub rest: Tensor,
}

impl SeparableKernel {
    pub fn new(axis: Axis, vec: Tensor, rest: Tensor) -> Result<SeparableKernel> {
        if vec.rank() != 1 {
            return Err(Error::InvalidShape(format!("separable vector must be 1D, got {:?}", vec.shape())));
        }
        if rest.rank() != 4 || rest.shape()[axis.index()] != 1 {
            return Err(Error::InvalidShape(format!(
                "separable remainder must be J1 x J2 x J3 x C with extent 1 along {axis}, got {:?}",
                rest.shape()
            )));
        }
        Ok(SeparableKernel { axis, vec, rest })
    }

    pub fn channels(&self) -> usize {
        self.rest.shape()[3]
    }

    /// Kernel extents after composition.
    pub fn extents(&self) -> [usize; 3] {
        let mut e = [self.rest.shape()[0], self.rest.shape()[1], self.rest.shape()[2]];
        e[self.axis.index()] = self.vec.len();
        e
    }

    /// The full kernel `vec * rest` (an outer product along `axis`).
    pub fn compose(&self) -> Kernel4 {
        let [j1, j2, j3] = self.extents();
        let a = self.axis.index();
        Kernel4(Tensor::from_fn(&[j1, j2, j3, self.channels()], |i| {
            let mut r = [i[0], i[1], i[2], i[3]];
            r[a] = 0;
            self.vec.data()[i[a]] * self.rest.get(&r)
        }))
    }

    /// Weights `[1, C, ..]` of the planar convolution.
    pub fn rest_weights(&self) -> Tensor {
        Kernel4(self.rest.clone()).to_conv_weights()
    }

    /// Weights `[1, 1, ..]` of the 1D convolution along `axis`.
    pub fn vec_weights(&self) -> Tensor {
        line_weights(self.axis, self.vec.data())
    }
}

fn line_weights(axis: Axis, taps: &[f64]) -> Tensor {
    let mut shape = [1, 1, 1, 1, 1];
    shape[2 + axis.index()] = taps.len();
    Tensor::from_vec(&shape, taps.to_vec()).expect("non-empty taps")
}

fn valid_conv(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let s = weights.shape();
    conv_forward(input, weights, None, &ConvSpec::new([s[2], s[3], s[4]], s[1], s[0]))
}

/// Both sides of the separable chain identity on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCheck {
    /// Convolution with the composed kernel.
    pub lhs: Tensor,
    /// Planar convolution with `rest`, then 1D convolution with `vec`.
    pub rhs: Tensor,
    pub max_abs_diff: f64,
}

/// Evaluates the composed-kernel convolution and the planar-then-1D chain on
/// `input` (`[N, C, D1, D2, D3]`, no padding).
pub fn verify_separable_chain(kernel: &SeparableKernel, input: &Tensor) -> Result<ChainCheck> {
    let lhs = valid_conv(input, &kernel.compose().to_conv_weights())?;
    let rhs = valid_conv(&valid_conv(input, &kernel.rest_weights())?, &kernel.vec_weights())?;
    let max_abs_diff = lhs.max_abs_diff(&rhs);
    Ok(ChainCheck { lhs, rhs, max_abs_diff })
}

/// Two consecutive single-channel separable kernels sharing an axis,
/// rearranged as one longer 1D kernel followed by the two planar parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedChain {
    pub axis: Axis,
    /// Full convolution of the two 1D vectors.
    pub composed_1d: Tensor,
    /// Single-channel conv weights `[1, 1, J1, J2, J3]`, applied in order.
    pub stages: Vec<Tensor>,
}

impl FusedChain {
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for w in &self.stages {
            x = valid_conv(&x, w)?;
        }
        Ok(x)
    }
}

/// Fuses two single-channel kernels separable along the same axis.
pub fn fuse_consecutive(a: &SeparableKernel, b: &SeparableKernel) -> Result<FusedChain> {
    if a.axis != b.axis {
        return Err(Error::AxisMismatch { a: a.axis, b: b.axis });
    }
    for k in [a, b] {
        if k.channels() != 1 {
            return Err(Error::Multichannel(k.channels()));
        }
    }
    let (u, v) = (a.vec.data(), b.vec.data());
    let mut taps = vec![0.0; u.len() + v.len() - 1];
    for (i, x) in u.iter().enumerate() {
        for (j, y) in v.iter().enumerate() {
            taps[i + j] += x * y;
        }
    }
    let composed_1d = Tensor::from_vec(&[taps.len()], taps.clone())?;
    Ok(FusedChain {
        axis: a.axis,
        composed_1d,
        stages: vec![line_weights(a.axis, &taps), a.rest_weights(), b.rest_weights()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_separable(r: &mut rng::Rng, axis: Axis, ext: [usize; 3], c: usize) -> SeparableKernel {
        let mut rest_shape = [ext[0], ext[1], ext[2], c];
        rest_shape[axis.index()] = 1;
        SeparableKernel::new(
            axis,
            rng::uniform(r, &[ext[axis.index()]], -1.0, 1.0),
            rng::uniform(r, &rest_shape, -1.0, 1.0),
        )
        .unwrap()
    }

    fn delta(axis: Axis) -> SeparableKernel {
        let mut shape = [3, 3, 3, 1];
        shape[axis.index()] = 1;
        let mut rest = Tensor::zeros(&shape);
        let mut centre = [1, 1, 1, 0];
        centre[axis.index()] = 0;
        rest.set(&centre, 1.0);
        SeparableKernel::new(axis, Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap(), rest).unwrap()
    }

    #[test]
    fn delta_chain_crops_to_input_interior() {
        let mut r = rng::seeded(1);
        let x = rng::uniform(&mut r, &[1, 1, 5, 5, 5], -1.0, 1.0);
        let check = verify_separable_chain(&delta(Axis::D1), &x).unwrap();
        let interior = Tensor::from_fn(&[1, 1, 3, 3, 3], |i| x.get(&[0, 0, i[2] + 1, i[3] + 1, i[4] + 1]));
        assert_eq!(check.lhs, interior);
        assert_eq!(check.rhs, interior);
        assert_eq!(check.max_abs_diff, 0.0);
    }

    #[test]
    fn chain_identity_all_orientations() {
        let mut r = rng::seeded(2);
        let x = rng::uniform(&mut r, &[1, 1, 6, 6, 6], -1.0, 1.0);
        for axis in Axis::ALL {
            let k = random_separable(&mut r, axis, [3, 3, 3], 1);
            let check = verify_separable_chain(&k, &x).unwrap();
            assert_eq!(check.lhs.shape(), &[1, 1, 4, 4, 4]);
            assert!(check.max_abs_diff < 1e-10);
        }
        let k = random_separable(&mut r, Axis::D2, [2, 4, 3], 2);
        let x2 = rng::uniform(&mut r, &[2, 2, 5, 6, 4], -1.0, 1.0);
        assert!(verify_separable_chain(&k, &x2).unwrap().max_abs_diff < 1e-10);
    }

    #[test]
    fn polynomial_product() {
        let rest = Tensor::full(&[1, 1, 1, 1], 1.0);
        let a = SeparableKernel::new(Axis::D1, Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), rest.clone()).unwrap();
        let b = SeparableKernel::new(Axis::D1, Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap(), rest).unwrap();
        let fused = fuse_consecutive(&a, &b).unwrap();
        assert_eq!(fused.composed_1d.data(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn fused_deltas_act_as_cropping_identity() {
        let mut r = rng::seeded(3);
        let x = rng::uniform(&mut r, &[1, 1, 7, 7, 7], -1.0, 1.0);
        let fused = fuse_consecutive(&delta(Axis::D3), &delta(Axis::D3)).unwrap();
        let y = fused.apply(&x).unwrap();
        let interior = Tensor::from_fn(&[1, 1, 3, 3, 3], |i| x.get(&[0, 0, i[2] + 2, i[3] + 2, i[4] + 2]));
        assert!(y.max_abs_diff(&interior) < 1e-15);
    }

    #[test]
    fn fusion_matches_sequential_application() {
        let mut r = rng::seeded(4);
        let x = rng::uniform(&mut r, &[1, 1, 8, 8, 8], -1.0, 1.0);
        for axis in Axis::ALL {
            let a = random_separable(&mut r, axis, [3, 2, 3], 1);
            let b = random_separable(&mut r, axis, [2, 3, 3], 1);
            let sequential =
                valid_conv(&valid_conv(&x, &a.compose().to_conv_weights()).unwrap(), &b.compose().to_conv_weights())
                    .unwrap();
            let fused = fuse_consecutive(&a, &b).unwrap().apply(&x).unwrap();
            assert!(fused.max_abs_diff(&sequential) < 1e-10);
        }
    }

    #[test]
    fn fusion_rejections() {
        let mut r = rng::seeded(5);
        let a = random_separable(&mut r, Axis::D1, [3, 3, 3], 1);
        let b = random_separable(&mut r, Axis::D2, [3, 3, 3], 1);
        assert!(matches!(fuse_consecutive(&a, &b), Err(Error::AxisMismatch { .. })));
        let c = random_separable(&mut r, Axis::D1, [3, 3, 3], 2);
        assert!(matches!(fuse_consecutive(&a, &c), Err(Error::Multichannel(2))));
    }
}
