//! `P_mSC_n` blocks: `m` parallel streams, each a chain of `n` planar (2D)
//! convolutions followed by one 1D convolution along the remaining axis,
//! with ReLU after every planar convolution and the stream outputs
//! concatenated along the channel dimension.
//!
//! The planar width of a stream is derived from the filter count that gives
//! a one-stream, one-layer block the parameter budget of the 3D convolution
//! it replaces ([`subspace_filters`]), divided by the stream divisor.

use alloc::format;
use alloc::vec::Vec;

use crate::rng::{self, Rng};
use crate::tensor::{concat_channels, conv_backward, conv_forward, relu_backward, relu_forward, split_channels};
use crate::{math, Axis, ConvSpec, Error, Result, Tensor};

/// Planar filter count that matches a `d x d x d` convolution from `in_ch`
/// to `out_ch` channels in parameters:
/// `floor(out * in * d^3 / (in * d^2 + out * d))`, at least 1.
pub fn subspace_filters(out_ch: usize, in_ch: usize, d: usize) -> usize {
    let (o, i, d) = (out_ch as u128, in_ch as u128, d as u128);
    let den = i * d * d + o * d;
    if den == 0 {
        return 1;
    }
    ((o * i * d * d * d) / den).max(1) as usize
}

/// Plane of a stream's 2D convolutions and the axis of its 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Orientation {
    pub plane: [Axis; 2],
    pub axis: Axis,
}

impl Orientation {
    pub const fn along(axis: Axis) -> Orientation {
        Orientation { plane: axis.others(), axis }
    }

    /// Stream `j` uses the 1D axis d1, d2, d3 in that order.
    pub fn for_stream(j: usize) -> Orientation {
        Orientation::along(Axis::ALL[j])
    }
}

/// Full description of one block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PscBlockSpec {
    /// Number of parallel streams (1..=3).
    pub m: usize,
    /// Planar convolutions per stream.
    pub n: usize,
    /// Kernel extent of the replaced cubic convolution.
    pub d: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Parameter-matching filter count before division across streams.
    pub subspace_filters: usize,
    /// Divisor applied to `subspace_filters` per stream.
    pub stream_divisor: usize,
    pub per_stream_filters: usize,
    pub per_stream_out: Vec<usize>,
    pub orientations: Vec<Orientation>,
    /// Stride of the replaced layer, applied by the first planar convolution
    /// (in-plane components) and the 1D convolution (axial component).
    pub stride: [usize; 3],
    /// Zero padding of the replaced layer, split the same way as `stride`.
    pub padding: [usize; 3],
}

/// Builds a block with `s = m`, same padding and unit stride.
pub fn build_block(m: usize, n: usize, d: usize, in_ch: usize, out_ch: usize) -> Result<PscBlockSpec> {
    if !(1..=3).contains(&m) {
        return Err(Error::InvalidBlock(format!("stream count m = {m} must be 1, 2 or 3")));
    }
    if n == 0 || d == 0 || in_ch == 0 {
        return Err(Error::InvalidBlock(format!("n = {n}, d = {d} and in_ch = {in_ch} must all be positive")));
    }
    if out_ch < m {
        return Err(Error::InvalidBlock(format!("{out_ch} output channels cannot be shared by {m} streams")));
    }
    let big_m = subspace_filters(out_ch, in_ch, d);
    let base = out_ch / m;
    let extra = out_ch % m;
    let spec = PscBlockSpec {
        m,
        n,
        d,
        in_channels: in_ch,
        out_channels: out_ch,
        subspace_filters: big_m,
        stream_divisor: m,
        per_stream_filters: (big_m / m).max(1),
        per_stream_out: (0..m).map(|j| base + usize::from(j < extra)).collect(),
        orientations: (0..m).map(Orientation::for_stream).collect(),
        stride: [1; 3],
        padding: [(d - 1) / 2; 3],
    };
    Ok(spec)
}

impl PscBlockSpec {
    pub fn with_geometry(mut self, stride: [usize; 3], padding: [usize; 3]) -> PscBlockSpec {
        self.stride = stride;
        self.padding = padding;
        self
    }

    /// Gives every stream the whole `subspace_filters` budget (`s = 1`).
    pub fn with_undivided_streams(mut self) -> PscBlockSpec {
        self.stream_divisor = 1;
        self.per_stream_filters = self.subspace_filters.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidBlock(msg));
        if !(1..=3).contains(&self.m) || self.n == 0 || self.d == 0 {
            return bad(format!("m = {}, n = {}, d = {} out of range", self.m, self.n, self.d));
        }
        if self.in_channels == 0 || self.stream_divisor == 0 {
            return bad("in_channels and s must be positive".into());
        }
        if self.per_stream_out.len() != self.m || self.orientations.len() != self.m {
            return bad(format!("expected {} per-stream outputs and orientations", self.m));
        }
        if self.per_stream_out.iter().sum::<usize>() != self.out_channels || self.per_stream_out.contains(&0) {
            return bad(format!(
                "per_stream_out {:?} must be positive and sum to {}",
                self.per_stream_out, self.out_channels
            ));
        }
        if self.per_stream_filters != (self.subspace_filters / self.stream_divisor).max(1) {
            return bad(format!(
                "per_stream_filters {} != max(1, floor({} / {}))",
                self.per_stream_filters, self.subspace_filters, self.stream_divisor
            ));
        }
        for (j, o) in self.orientations.iter().enumerate() {
            if o.plane != o.axis.others() {
                return bad(format!("stream {j}: plane {:?} does not exclude axis {}", o.plane, o.axis));
            }
            if self.orientations[..j].contains(o) {
                return bad(format!("stream {j} repeats orientation along {}", o.axis));
            }
        }
        if self.m == 1 && self.orientations[0].axis != Axis::D1 {
            return bad("a single stream must run its 1D convolution along d1".into());
        }
        if self.stride.contains(&0) {
            return bad(format!("stride {:?} must be positive", self.stride));
        }
        Ok(())
    }

    /// Convolution specs of stream `j`: the planar layers, then the 1D layer.
    pub fn stream_convs(&self, j: usize) -> (Vec<ConvSpec>, ConvSpec) {
        let o = self.orientations[j];
        let a = o.axis.index();
        let f = self.per_stream_filters;
        let mut planar_kernel = [self.d; 3];
        planar_kernel[a] = 1;
        let mut first_stride = self.stride;
        first_stride[a] = 1;
        let mut first_pad = self.padding;
        first_pad[a] = 0;
        let mut inner_pad = [(self.d - 1) / 2; 3];
        inner_pad[a] = 0;
        let mut planar = Vec::with_capacity(self.n);
        planar
            .push(ConvSpec::new(planar_kernel, self.in_channels, f).with_stride(first_stride).with_padding(first_pad));
        for _ in 1..self.n {
            planar.push(ConvSpec::new(planar_kernel, f, f).with_padding(inner_pad));
        }
        let mut line_kernel = [1; 3];
        line_kernel[a] = self.d;
        let mut line_stride = [1; 3];
        line_stride[a] = self.stride[a];
        let mut line_pad = [0; 3];
        line_pad[a] = self.padding[a];
        let line = ConvSpec::new(line_kernel, f, self.per_stream_out[j])
            .with_stride(line_stride)
            .with_padding(line_pad)
            .with_bias(true);
        (planar, line)
    }

    /// Output spatial extents for the given input extents.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let (planar, line) = self.stream_convs(0);
        let mut e = input;
        for c in &planar {
            e = c.output_extents(e)?;
        }
        line.output_extents(e)
    }
}

/// Exact number of learnable parameters in a block.
pub fn block_param_count(spec: &PscBlockSpec) -> u64 {
    let (d, f) = (spec.d as u64, spec.per_stream_filters as u64);
    let (n, cin) = (spec.n as u64, spec.in_channels as u64);
    spec.per_stream_out
        .iter()
        .map(|&out| {
            let out = out as u64;
            cin * f * d * d + (n - 1) * f * f * d * d + f * out * d + out
        })
        .sum()
}

/// Weights of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    pub planar: Vec<Tensor>,
    pub line: Tensor,
    /// Bias of the terminal 1D convolution.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub streams: Vec<StreamWeights>,
}

impl BlockWeights {
    pub fn zeros(spec: &PscBlockSpec) -> BlockWeights {
        let streams = (0..spec.m)
            .map(|j| {
                let (planar, line) = spec.stream_convs(j);
                StreamWeights {
                    planar: planar.iter().map(|c| Tensor::zeros(&c.weight_shape())).collect(),
                    line: Tensor::zeros(&line.weight_shape()),
                    bias: Tensor::zeros(&[line.out_channels]),
                }
            })
            .collect();
        BlockWeights { streams }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn init(spec: &PscBlockSpec, rng: &mut Rng) -> BlockWeights {
        let mut w = BlockWeights::zeros(spec);
        for (j, s) in w.streams.iter_mut().enumerate() {
            let (planar, line) = spec.stream_convs(j);
            for (t, c) in s.planar.iter_mut().zip(&planar) {
                *t = fan_in_uniform(rng, c);
            }
            s.line = fan_in_uniform(rng, &line);
            let bound = 1.0 / math::sqrt(fan_in(&line) as f64);
            s.bias = rng::uniform(rng, &[line.out_channels], -bound, bound);
        }
        w
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in &self.streams {
            out.extend(s.planar.iter());
            out.push(&s.line);
            out.push(&s.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.streams {
            out.extend(s.planar.iter_mut());
            out.push(&mut s.line);
            out.push(&mut s.bias);
        }
        out
    }

    pub fn check(&self, spec: &PscBlockSpec) -> Result<()> {
        let expect = BlockWeights::zeros(spec);
        let ok = self.streams.len() == expect.streams.len()
            && self.streams.iter().zip(&expect.streams).all(|(a, b)| {
                a.planar.len() == b.planar.len()
                    && a.planar.iter().zip(&b.planar).all(|(x, y)| x.shape() == y.shape())
                    && a.line.shape() == b.line.shape()
                    && a.bias.shape() == b.bias.shape()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::mismatch("block", "weights do not match the block spec"))
        }
    }
}

pub(crate) fn fan_in(c: &ConvSpec) -> usize {
    c.in_channels * c.kernel.iter().product::<usize>()
}

pub(crate) fn fan_in_uniform(rng: &mut Rng, c: &ConvSpec) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in(c) as f64);
    rng::uniform(rng, &c.weight_shape(), -bound, bound)
}

/// Nonlinearity after each planar convolution. `Identity` exists for tests
/// of the purely linear chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Identity => x.clone(),
        }
    }

    fn backward(self, grad: &Tensor, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => relu_backward(grad, x),
            Activation::Identity => Ok(grad.clone()),
        }
    }
}

struct StreamTrace {
    /// Input of each planar layer, then the input of the 1D layer.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each planar layer.
    pre: Vec<Tensor>,
    out: Tensor,
}

fn run_stream(
    spec: &PscBlockSpec,
    w: &StreamWeights,
    j: usize,
    input: &Tensor,
    act: Activation,
) -> Result<StreamTrace> {
    let (planar, line) = spec.stream_convs(j);
    let mut inputs = Vec::with_capacity(spec.n + 1);
    let mut pre = Vec::with_capacity(spec.n);
    let mut x = input.clone();
    for (c, wt) in planar.iter().zip(&w.planar) {
        let z = conv_forward(&x, wt, None, c)?;
        inputs.push(x);
        x = act.forward(&z);
        pre.push(z);
    }
    let out = conv_forward(&x, &w.line, Some(&w.bias), &line)?;
    inputs.push(x);
    Ok(StreamTrace { inputs, pre, out })
}

fn check_input(spec: &PscBlockSpec, weights: &BlockWeights, input: &Tensor) -> Result<()> {
    spec.validate()?;
    weights.check(spec)?;
    let c = input.dims5("block")?[1];
    if c != spec.in_channels {
        return Err(Error::mismatch(
            "block",
            format!("channel dimension: input has {c} channels, block expects {}", spec.in_channels),
        ));
    }
    Ok(())
}

pub fn block_forward(spec: &PscBlockSpec, weights: &BlockWeights, input: &Tensor) -> Result<Tensor> {
    block_forward_with(spec, weights, input, Activation::Relu)
}

pub fn block_forward_with(
    spec: &PscBlockSpec,
    weights: &BlockWeights,
    input: &Tensor,
    act: Activation,
) -> Result<Tensor> {
    check_input(spec, weights, input)?;
    let outs = weights
        .streams
        .iter()
        .enumerate()
        .map(|(j, w)| run_stream(spec, w, j, input, act).map(|t| t.out))
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&outs.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub input: Tensor,
    pub weights: BlockWeights,
}

pub fn block_backward(
    spec: &PscBlockSpec,
    weights: &BlockWeights,
    input: &Tensor,
    grad_out: &Tensor,
) -> Result<BlockGrads> {
    block_backward_with(spec, weights, input, grad_out, Activation::Relu)
}

pub fn block_backward_with(
    spec: &PscBlockSpec,
    weights: &BlockWeights,
    input: &Tensor,
    grad_out: &Tensor,
    act: Activation,
) -> Result<BlockGrads> {
    check_input(spec, weights, input)?;
    let grads_out = split_channels(grad_out, &spec.per_stream_out)?;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grads = BlockWeights::zeros(spec);
    for (j, (w, g)) in weights.streams.iter().zip(&grads_out).enumerate() {
        let trace = run_stream(spec, w, j, input, act)?;
        if g.shape() != trace.out.shape() {
            return Err(Error::mismatch(
                "block_backward",
                format!("grad_out slice {:?} vs stream output {:?}", g.shape(), trace.out.shape()),
            ));
        }
        let (planar, line) = spec.stream_convs(j);
        let gl = conv_backward(g, &trace.inputs[spec.n], &w.line, &line)?;
        grads.streams[j].line = gl.weights;
        grads.streams[j].bias = gl.bias;
        let mut gx = gl.input;
        for i in (0..spec.n).rev() {
            let gz = act.backward(&gx, &trace.pre[i])?;
            let gp = conv_backward(&gz, &trace.inputs[i], &w.planar[i], &planar[i])?;
            grads.streams[j].planar[i] = gp.weights;
            gx = gp.input;
        }
        grad_input.add_scaled(1.0, &gx)?;
    }
    Ok(BlockGrads { input: grad_input, weights: grads })
}
