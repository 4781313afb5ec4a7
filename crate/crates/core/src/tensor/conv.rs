use alloc::format;
use alloc::vec;

use super::{Axis, Tensor};
use crate::{Error, Result};

/// Geometry of a 3D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub bias: bool,
}

/// How many spatial axes a kernel actually spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Spans all three axes.
    Full3d,
    /// Extent 1 along `flat`: a 2D convolution embedded in 3D.
    Planar { flat: Axis },
    /// Extent > 1 only along `along`.
    Linear { along: Axis },
    /// 1x1x1.
    Pointwise,
}

impl ConvSpec {
    /// Stride 1, no padding, no bias.
    pub fn new(kernel: [usize; 3], in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec { kernel, in_channels, out_channels, stride: [1; 3], padding: [0; 3], bias: false }
    }

    /// Stride 1 with `(J - 1) / 2` zero padding per axis.
    pub fn same(kernel: [usize; 3], in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec::new(kernel, in_channels, out_channels).with_padding(kernel.map(|j| (j - 1) / 2))
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> ConvSpec {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> ConvSpec {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> ConvSpec {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) {
            return Err(Error::InvalidShape(format!("kernel extents must be positive, got {:?}", self.kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidShape("channel counts must be positive".into()));
        }
        if self.stride.contains(&0) {
            return Err(Error::InvalidShape(format!("strides must be >= 1, got {:?}", self.stride)));
        }
        Ok(())
    }

    pub fn kind(&self) -> ConvKind {
        let unit: [bool; 3] = self.kernel.map(|j| j == 1);
        match unit.iter().filter(|&&u| u).count() {
            0 => ConvKind::Full3d,
            1 => ConvKind::Planar { flat: Axis::ALL[unit.iter().position(|&u| u).unwrap()] },
            2 => ConvKind::Linear { along: Axis::ALL[unit.iter().position(|&u| !u).unwrap()] },
            _ => ConvKind::Pointwise,
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [j1, j2, j3] = self.kernel;
        [self.out_channels, self.in_channels, j1, j2, j3]
    }

    pub fn param_count(&self) -> u64 {
        let w: u64 = self.weight_shape().iter().map(|&d| d as u64).product();
        w + if self.bias { self.out_channels as u64 } else { 0 }
    }

    /// Output spatial extents for the given input extents.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for k in 0..3 {
            let padded = input[k] + 2 * self.padding[k];
            if padded < self.kernel[k] {
                return Err(Error::mismatch(
                    "conv",
                    format!(
                        "spatial dimension d{}: padded extent {padded} is smaller than kernel extent {}",
                        k + 1,
                        self.kernel[k]
                    ),
                ));
            }
            out[k] = (padded - self.kernel[k]) / self.stride[k] + 1;
            if out[k] == 0 {
                return Err(Error::EmptyOutput { op: "conv", dim: k + 2 });
            }
        }
        Ok(out)
    }

    fn check(&self, input: &Tensor, weights: &Tensor) -> Result<([usize; 5], [usize; 5])> {
        self.validate()?;
        let x = input.dims5("conv")?;
        if x[1] != self.in_channels {
            return Err(Error::mismatch(
                "conv",
                format!("channel dimension: input has {} channels, spec expects {}", x[1], self.in_channels),
            ));
        }
        let ws = self.weight_shape();
        if weights.shape() != ws {
            return Err(Error::mismatch(
                "conv",
                format!("weights have shape {:?}, spec expects {:?}", weights.shape(), ws),
            ));
        }
        let o = self.output_extents([x[2], x[3], x[4]])?;
        Ok((x, [x[0], self.out_channels, o[0], o[1], o[2]]))
    }
}

/// Strided view helper: index of input coordinate `o * s + j - p`, if inside `[0, extent)`.
#[inline]
fn tap(o: usize, j: usize, s: usize, p: usize, extent: usize) -> Option<usize> {
    let pos = o * s + j;
    if pos < p || pos - p >= extent {
        None
    } else {
        Some(pos - p)
    }
}

/// Cross-correlation of `input` with `weights` (`[C_out, C_in, J1, J2, J3]`).
pub fn conv_forward(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (x, y) = spec.check(input, weights)?;
    match (spec.bias, bias) {
        (true, Some(b)) if b.shape() == [spec.out_channels] => {}
        (true, Some(b)) => {
            return Err(Error::mismatch(
                "conv",
                format!("bias has shape {:?}, expected [{}]", b.shape(), spec.out_channels),
            ))
        }
        (true, None) => return Err(Error::mismatch("conv", "spec declares a bias but none was given")),
        (false, Some(_)) => return Err(Error::mismatch("conv", "bias given but spec declares none")),
        (false, None) => {}
    }
    let [n, cin, d1, d2, d3] = x;
    let [_, cout, o1, o2, o3] = y;
    let [j1, j2, j3] = spec.kernel;
    let [s1, s2, s3] = spec.stride;
    let [p1, p2, p3] = spec.padding;
    let xd = input.data();
    let wd = weights.data();
    let mut out = vec![0.0; n * cout * o1 * o2 * o3];
    let mut idx = 0;
    for b in 0..n {
        for co in 0..cout {
            let b0 = bias.map_or(0.0, |t| t.data()[co]);
            for a1 in 0..o1 {
                for a2 in 0..o2 {
                    for a3 in 0..o3 {
                        let mut acc = b0;
                        for ci in 0..cin {
                            let xbase = (b * cin + ci) * d1;
                            let wbase = (co * cin + ci) * j1;
                            for k1 in 0..j1 {
                                let Some(i1) = tap(a1, k1, s1, p1, d1) else { continue };
                                for k2 in 0..j2 {
                                    let Some(i2) = tap(a2, k2, s2, p2, d2) else { continue };
                                    let xrow = ((xbase + i1) * d2 + i2) * d3;
                                    let wrow = ((wbase + k1) * j2 + k2) * j3;
                                    for k3 in 0..j3 {
                                        if let Some(i3) = tap(a3, k3, s3, p3, d3) {
                                            acc += wd[wrow + k3] * xd[xrow + i3];
                                        }
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&y, out)
}

/// Gradients of `sum(grad_output * conv_forward(input, weights))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    /// Always `[C_out]`; meaningful only when the spec has a bias.
    pub bias: Tensor,
}

pub fn conv_backward(grad_output: &Tensor, input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let (x, y) = spec.check(input, weights)?;
    if grad_output.shape() != y {
        return Err(Error::mismatch(
            "conv_backward",
            format!("grad_output has shape {:?}, forward output is {:?}", grad_output.shape(), y),
        ));
    }
    let [n, cin, d1, d2, d3] = x;
    let [_, cout, o1, o2, o3] = y;
    let [j1, j2, j3] = spec.kernel;
    let [s1, s2, s3] = spec.stride;
    let [p1, p2, p3] = spec.padding;
    let xd = input.data();
    let wd = weights.data();
    let gd = grad_output.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; cout];
    let mut idx = 0;
    for b in 0..n {
        for (co, gb_co) in gb.iter_mut().enumerate() {
            for a1 in 0..o1 {
                for a2 in 0..o2 {
                    for a3 in 0..o3 {
                        let g = gd[idx];
                        idx += 1;
                        *gb_co += g;
                        if g == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            let xbase = (b * cin + ci) * d1;
                            let wbase = (co * cin + ci) * j1;
                            for k1 in 0..j1 {
                                let Some(i1) = tap(a1, k1, s1, p1, d1) else { continue };
                                for k2 in 0..j2 {
                                    let Some(i2) = tap(a2, k2, s2, p2, d2) else { continue };
                                    let xrow = ((xbase + i1) * d2 + i2) * d3;
                                    let wrow = ((wbase + k1) * j2 + k2) * j3;
                                    for k3 in 0..j3 {
                                        if let Some(i3) = tap(a3, k3, s3, p3, d3) {
                                            gw[wrow + k3] += g * xd[xrow + i3];
                                            gx[xrow + i3] += g * wd[wrow + k3];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weights: Tensor::from_vec(weights.shape(), gw)?,
        bias: Tensor::from_vec(&[cout], gb)?,
    })
}
