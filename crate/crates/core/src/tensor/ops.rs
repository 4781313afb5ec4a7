use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `grad` where `x > 0`, zero elsewhere.
pub fn relu_backward(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    grad.zip_with(x, |g, v| if v > 0.0 { g } else { 0.0 })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, |u, v| u + v)
}

/// Concatenate rank-5 tensors along the channel dimension, in order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::mismatch("concat", "no tensors to concatenate"))?;
    let s0 = first.dims5("concat")?;
    let mut channels = 0;
    for (i, p) in parts.iter().enumerate() {
        let s = p.dims5("concat")?;
        for d in [0, 2, 3, 4] {
            if s[d] != s0[d] {
                return Err(Error::mismatch(
                    "concat",
                    format!("part {i} has extent {} in dimension {d}, part 0 has {}", s[d], s0[d]),
                ));
            }
        }
        channels += s[1];
    }
    let vol = s0[2] * s0[3] * s0[4];
    let mut data = Vec::with_capacity(s0[0] * channels * vol);
    for b in 0..s0[0] {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[b * c * vol..(b + 1) * c * vol]);
        }
    }
    Tensor::from_vec(&[s0[0], channels, s0[2], s0[3], s0[4]], data)
}

/// Inverse of [`concat_channels`]: split into consecutive channel blocks.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, d1, d2, d3] = x.dims5("split")?;
    if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
        return Err(Error::mismatch("split", format!("sizes {sizes:?} do not partition {c} channels")));
    }
    let vol = d1 * d2 * d3;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &k in sizes {
        let mut data = Vec::with_capacity(n * k * vol);
        for b in 0..n {
            let off = (b * c + start) * vol;
            data.extend_from_slice(&x.data()[off..off + k * vol]);
        }
        out.push(Tensor::from_vec(&[n, k, d1, d2, d3], data)?);
        start += k;
    }
    Ok(out)
}

fn pool_extents(x: [usize; 5], window: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for k in 0..3 {
        if window[k] == 0 || stride[k] == 0 {
            return Err(Error::InvalidShape(format!("pool window {window:?} / stride {stride:?} must be positive")));
        }
        if window[k] > x[k + 2] {
            return Err(Error::mismatch(
                "maxpool",
                format!("window {} exceeds input extent {} in spatial dimension d{}", window[k], x[k + 2], k + 1),
            ));
        }
        out[k] = (x[k + 2] - window[k]) / stride[k] + 1;
    }
    Ok(out)
}

/// Visits each pooling window and reports (output offset, input offset of the first maximum).
fn for_each_argmax(
    x: &Tensor,
    window: [usize; 3],
    stride: [usize; 3],
    mut f: impl FnMut(usize, usize),
) -> Result<[usize; 5]> {
    let s = x.dims5("maxpool")?;
    let o = pool_extents(s, window, stride)?;
    let [n, c, d1, d2, d3] = s;
    let xd = x.data();
    let mut oi = 0;
    for nc in 0..n * c {
        let base = nc * d1 * d2 * d3;
        for a1 in 0..o[0] {
            for a2 in 0..o[1] {
                for a3 in 0..o[2] {
                    let mut best = usize::MAX;
                    for k1 in 0..window[0] {
                        for k2 in 0..window[1] {
                            for k3 in 0..window[2] {
                                let i = base
                                    + ((a1 * stride[0] + k1) * d2 + a2 * stride[1] + k2) * d3
                                    + a3 * stride[2]
                                    + k3;
                                if best == usize::MAX || xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    f(oi, best);
                    oi += 1;
                }
            }
        }
    }
    Ok([n, c, o[0], o[1], o[2]])
}

pub fn maxpool3d(x: &Tensor, window: [usize; 3], stride: [usize; 3]) -> Result<Tensor> {
    let mut out = Vec::new();
    let shape = for_each_argmax(x, window, stride, |_, i| out.push(x.data()[i]))?;
    Tensor::from_vec(&shape, out)
}

/// Routes each output gradient to the first maximal input of its window.
pub fn maxpool3d_backward(grad: &Tensor, x: &Tensor, window: [usize; 3], stride: [usize; 3]) -> Result<Tensor> {
    let mut gx = vec![0.0; x.len()];
    let mut pairs = Vec::new();
    let shape = for_each_argmax(x, window, stride, |o, i| pairs.push((o, i)))?;
    if grad.shape() != shape {
        return Err(Error::mismatch("maxpool_backward", format!("grad {:?} vs output {:?}", grad.shape(), shape)));
    }
    for (o, i) in pairs {
        gx[i] += grad.data()[o];
    }
    Tensor::from_vec(x.shape(), gx)
}

pub fn upsample_nearest(x: &Tensor, factor: [usize; 3]) -> Result<Tensor> {
    let [n, c, d1, d2, d3] = x.dims5("upsample")?;
    if factor.contains(&0) {
        return Err(Error::InvalidShape(format!("upsample factor {factor:?} must be positive")));
    }
    let shape = [n, c, d1 * factor[0], d2 * factor[1], d3 * factor[2]];
    Ok(Tensor::from_fn(&shape, |i| x.get(&[i[0], i[1], i[2] / factor[0], i[3] / factor[1], i[4] / factor[2]])))
}

pub fn upsample_nearest_backward(grad: &Tensor, factor: [usize; 3]) -> Result<Tensor> {
    let [n, c, u1, u2, u3] = grad.dims5("upsample_backward")?;
    if factor.contains(&0) || u1 % factor[0] != 0 || u2 % factor[1] != 0 || u3 % factor[2] != 0 {
        return Err(Error::mismatch(
            "upsample_backward",
            format!("extents {:?} not divisible by {factor:?}", grad.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[n, c, u1 / factor[0], u2 / factor[1], u3 / factor[2]]);
    for b in 0..n {
        for ch in 0..c {
            for i1 in 0..u1 {
                for i2 in 0..u2 {
                    for i3 in 0..u3 {
                        let idx = [b, ch, i1 / factor[0], i2 / factor[1], i3 / factor[2]];
                        let off = out.offset(&idx);
                        out.data_mut()[off] += grad.get(&[b, ch, i1, i2, i3]);
                    }
                }
            }
        }
    }
    Ok(out)
}
