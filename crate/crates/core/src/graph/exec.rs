use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{ModelGraph, Op};
use crate::block::{block_backward, block_forward, fan_in, fan_in_uniform, BlockWeights};
use crate::rng::{self, Rng};
use crate::tensor::{
    concat_channels, conv_backward, conv_forward, maxpool3d, maxpool3d_backward, relu_backward, relu_forward,
    split_channels, upsample_nearest, upsample_nearest_backward,
};
use crate::{math, Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams {
    Conv { weights: Tensor, bias: Option<Tensor> },
    Block(BlockWeights),
}

impl NodeParams {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            NodeParams::Conv { weights, bias } => core::iter::once(weights).chain(bias.as_ref()).collect(),
            NodeParams::Block(b) => b.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            NodeParams::Conv { weights, bias } => core::iter::once(weights).chain(bias.as_mut()).collect(),
            NodeParams::Block(b) => b.tensors_mut(),
        }
    }
}

/// Learnable parameters of a graph, in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphWeights {
    entries: Vec<(String, NodeParams)>,
}

impl GraphWeights {
    pub fn zeros(graph: &ModelGraph) -> GraphWeights {
        let entries = graph
            .nodes()
            .iter()
            .filter_map(|n| {
                let p = match &n.op {
                    Op::Conv3d(c) => NodeParams::Conv {
                        weights: Tensor::zeros(&c.weight_shape()),
                        bias: c.bias.then(|| Tensor::zeros(&[c.out_channels])),
                    },
                    Op::PscBlock(b) => NodeParams::Block(BlockWeights::zeros(b)),
                    _ => return None,
                };
                Some((n.id.clone(), p))
            })
            .collect();
        GraphWeights { entries }
    }

    /// Fan-in uniform initialization, drawn in node order.
    pub fn init(graph: &ModelGraph, rng: &mut Rng) -> GraphWeights {
        let mut w = GraphWeights::zeros(graph);
        for (id, p) in &mut w.entries {
            match (&graph.node(id).expect("weights follow the graph").op, p) {
                (Op::Conv3d(c), NodeParams::Conv { weights, bias }) => {
                    *weights = fan_in_uniform(rng, c);
                    if let Some(b) = bias {
                        let bound = 1.0 / math::sqrt(fan_in(c) as f64);
                        *b = rng::uniform(rng, &[c.out_channels], -bound, bound);
                    }
                }
                (Op::PscBlock(s), NodeParams::Block(b)) => *b = BlockWeights::init(s, rng),
                _ => unreachable!("zeros pairs ops with params"),
            }
        }
        w
    }

    pub fn get(&self, id: &str) -> Option<&NodeParams> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, p)| p)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut NodeParams> {
        self.entries.iter_mut().find(|(k, _)| k == id).map(|(_, p)| p)
    }

    pub fn entries(&self) -> &[(String, NodeParams)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().flat_map(|(_, p)| p.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().flat_map(|(_, p)| p.tensors_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::mismatch(
                "set_flat",
                format!("{} values for {} parameters", flat.len(), self.param_count()),
            ));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Rejects weights whose layout does not match the graph.
    pub fn check(&self, graph: &ModelGraph) -> Result<()> {
        let expect = GraphWeights::zeros(graph);
        if self.entries.len() != expect.entries.len() {
            return Err(Error::mismatch("weights", "parameterized nodes differ from the graph"));
        }
        for ((id, a), (eid, b)) in self.entries.iter().zip(&expect.entries) {
            let same = id == eid && {
                let (ta, tb) = (a.tensors(), b.tensors());
                ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.shape() == y.shape())
            };
            if !same {
                return Err(Error::graph(eid, "weights do not match the node"));
            }
        }
        Ok(())
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn with_spatial(n: usize, c: usize, e: [usize; 3]) -> Vec<usize> {
    vec![n, c, e[0], e[1], e[2]]
}

/// Output shape of every node for an input of shape `[N, C, D1, D2, D3]`.
pub fn infer_shapes(graph: &ModelGraph, input: &[usize]) -> Result<Vec<Vec<usize>>> {
    if input.len() != 5 || input.contains(&0) {
        return Err(Error::InvalidShape(format!("graph input must be [N, C, D1, D2, D3], got {input:?}")));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes().len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let ins: Vec<&Vec<usize>> = graph.input_positions(i).into_iter().map(|p| &shapes[p]).collect();
        let err = |msg: String| Error::graph(&node.id, msg);
        let shape = match &node.op {
            Op::Input { channels } => {
                if input[1] != *channels {
                    return Err(err(format!("expects {channels} channels, input has {}", input[1])));
                }
                input.to_vec()
            }
            Op::Output | Op::Relu => ins[0].clone(),
            Op::Conv3d(c) => {
                if ins[0][1] != c.in_channels {
                    return Err(err(format!("expects {} input channels, got {}", c.in_channels, ins[0][1])));
                }
                let e = c.output_extents(spatial(ins[0])).map_err(|e| err(format!("{e}")))?;
                with_spatial(input[0], c.out_channels, e)
            }
            Op::PscBlock(b) => {
                if ins[0][1] != b.in_channels {
                    return Err(err(format!("expects {} input channels, got {}", b.in_channels, ins[0][1])));
                }
                let e = b.output_extents(spatial(ins[0])).map_err(|e| err(format!("{e}")))?;
                with_spatial(input[0], b.out_channels, e)
            }
            Op::MaxPool { window, stride } => {
                let e = spatial(ins[0]);
                let mut o = [0; 3];
                for k in 0..3 {
                    if window[k] > e[k] {
                        return Err(err(format!("pool window {window:?} exceeds extents {e:?}")));
                    }
                    o[k] = (e[k] - window[k]) / stride[k] + 1;
                }
                with_spatial(input[0], ins[0][1], o)
            }
            Op::Upsample { factor } => {
                let e = spatial(ins[0]);
                with_spatial(input[0], ins[0][1], [e[0] * factor[0], e[1] * factor[1], e[2] * factor[2]])
            }
            Op::Concat => {
                let e = spatial(ins[0]);
                if ins.iter().any(|s| spatial(s) != e) {
                    return Err(err(format!("concat inputs disagree spatially: {ins:?}")));
                }
                with_spatial(input[0], ins.iter().map(|s| s[1]).sum(), e)
            }
            Op::Add => {
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(err(format!("add inputs disagree: {ins:?}")));
                }
                ins[0].clone()
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

fn params<'a>(weights: &'a GraphWeights, id: &str) -> Result<&'a NodeParams> {
    weights.get(id).ok_or_else(|| Error::graph(id, "no weights for this node"))
}

/// Value of every node, in node order.
pub fn forward_trace(graph: &ModelGraph, weights: &GraphWeights, input: &Tensor) -> Result<Vec<Tensor>> {
    let mut vals: Vec<Tensor> = Vec::with_capacity(graph.nodes().len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let ins: Vec<&Tensor> = graph.input_positions(i).into_iter().map(|p| &vals[p]).collect();
        let ctx = |e: Error| Error::graph(&node.id, format!("{e}"));
        let v = match &node.op {
            Op::Input { channels } => {
                let [_, c, ..] = input.dims5("graph input").map_err(ctx)?;
                if c != *channels {
                    return Err(ctx(Error::mismatch("graph input", format!("{c} channels, expected {channels}"))));
                }
                input.clone()
            }
            Op::Output => ins[0].clone(),
            Op::Relu => relu_forward(ins[0]),
            Op::Conv3d(c) => match params(weights, &node.id)? {
                NodeParams::Conv { weights, bias } => conv_forward(ins[0], weights, bias.as_ref(), c).map_err(ctx)?,
                NodeParams::Block(_) => return Err(Error::graph(&node.id, "block weights on a conv node")),
            },
            Op::PscBlock(b) => match params(weights, &node.id)? {
                NodeParams::Block(w) => block_forward(b, w, ins[0]).map_err(ctx)?,
                NodeParams::Conv { .. } => return Err(Error::graph(&node.id, "conv weights on a block node")),
            },
            Op::MaxPool { window, stride } => maxpool3d(ins[0], *window, *stride).map_err(ctx)?,
            Op::Upsample { factor } => upsample_nearest(ins[0], *factor).map_err(ctx)?,
            Op::Concat => concat_channels(&ins).map_err(ctx)?,
            Op::Add => {
                let mut acc = ins[0].clone();
                for t in &ins[1..] {
                    acc.add_scaled(1.0, t).map_err(ctx)?;
                }
                acc
            }
        };
        vals.push(v);
    }
    Ok(vals)
}

pub fn forward(graph: &ModelGraph, weights: &GraphWeights, input: &Tensor) -> Result<Tensor> {
    let mut trace = forward_trace(graph, weights, input)?;
    let out = graph.nodes().iter().position(|n| n.op == Op::Output).expect("validated graph");
    Ok(trace.swap_remove(out))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_scaled(1.0, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of `sum(grad_output * forward(input))` with respect to the
/// graph input and every weight, given the trace of that forward pass.
pub fn backward(
    graph: &ModelGraph,
    weights: &GraphWeights,
    trace: &[Tensor],
    grad_output: &Tensor,
) -> Result<(Tensor, GraphWeights)> {
    let nodes = graph.nodes();
    if trace.len() != nodes.len() {
        return Err(Error::mismatch("graph backward", "trace does not match the graph"));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    let out = nodes.iter().position(|n| n.op == Op::Output).expect("validated graph");
    if grad_output.shape() != trace[out].shape() {
        return Err(Error::mismatch(
            "graph backward",
            format!("grad_output {:?} vs output {:?}", grad_output.shape(), trace[out].shape()),
        ));
    }
    grads[out] = Some(grad_output.clone());
    let mut wgrads = GraphWeights::zeros(graph);
    let mut grad_input = None;
    for i in (0..nodes.len()).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &nodes[i];
        let ctx = |e: Error| Error::graph(&node.id, format!("{e}"));
        let pos = graph.input_positions(i);
        let x = pos.first().map(|&p| &trace[p]);
        let ins: Vec<Tensor> = match &node.op {
            Op::Input { .. } => {
                grad_input = Some(g);
                continue;
            }
            Op::Output => vec![g],
            Op::Relu => vec![relu_backward(&g, x.unwrap()).map_err(ctx)?],
            Op::Conv3d(c) => {
                let NodeParams::Conv { weights: w, .. } = params(weights, &node.id)? else {
                    return Err(Error::graph(&node.id, "block weights on a conv node"));
                };
                let cg = conv_backward(&g, x.unwrap(), w, c).map_err(ctx)?;
                if let Some(NodeParams::Conv { weights, bias }) = wgrads.get_mut(&node.id) {
                    *weights = cg.weights;
                    if let Some(b) = bias {
                        *b = cg.bias;
                    }
                }
                vec![cg.input]
            }
            Op::PscBlock(b) => {
                let NodeParams::Block(w) = params(weights, &node.id)? else {
                    return Err(Error::graph(&node.id, "conv weights on a block node"));
                };
                let bg = block_backward(b, w, x.unwrap(), &g).map_err(ctx)?;
                if let Some(NodeParams::Block(slot)) = wgrads.get_mut(&node.id) {
                    *slot = bg.weights;
                }
                vec![bg.input]
            }
            Op::MaxPool { window, stride } => {
                vec![maxpool3d_backward(&g, x.unwrap(), *window, *stride).map_err(ctx)?]
            }
            Op::Upsample { factor } => vec![upsample_nearest_backward(&g, *factor).map_err(ctx)?],
            Op::Concat => {
                let sizes: Vec<usize> = pos.iter().map(|&p| trace[p].shape()[1]).collect();
                split_channels(&g, &sizes).map_err(ctx)?
            }
            Op::Add => vec![g; pos.len()],
        };
        for (p, gi) in pos.into_iter().zip(ins) {
            accumulate(&mut grads[p], gi).map_err(ctx)?;
        }
    }
    let gi = grad_input.unwrap_or_else(|| Tensor::zeros(trace[0].shape()));
    Ok((gi, wgrads))
}

#[cfg(test)]
mod tests {
    use super::super::{rewrite, Node, RewriteOptions};
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};
    use crate::ConvSpec;

    fn small_graph() -> ModelGraph {
        let conv = |k: [usize; 3], i, o| Op::Conv3d(ConvSpec::same(k, i, o).with_bias(true));
        ModelGraph::new(vec![
            Node::new("x", Op::Input { channels: 2 }, &[]),
            Node::new("c1", conv([3; 3], 2, 3), &["x"]),
            Node::new("r1", Op::Relu, &["c1"]),
            Node::new("p", Op::MaxPool { window: [2; 3], stride: [2; 3] }, &["r1"]),
            Node::new("c2", conv([3; 3], 3, 3), &["p"]),
            Node::new("u", Op::Upsample { factor: [2; 3] }, &["c2"]),
            Node::new("k", Op::Concat, &["u", "r1"]),
            Node::new("c3", conv([1; 3], 6, 3), &["k"]),
            Node::new("a", Op::Add, &["c3", "c1"]),
            Node::new("y", Op::Output, &["a"]),
        ])
        .unwrap()
    }

    #[test]
    fn shapes_agree_with_forward() {
        let g = small_graph();
        let mut r = rng::seeded(1);
        let w = GraphWeights::init(&g, &mut r);
        let x = rng::uniform(&mut r, &[2, 2, 4, 6, 4], -1.0, 1.0);
        let trace = forward_trace(&g, &w, &x).unwrap();
        let shapes = infer_shapes(&g, x.shape()).unwrap();
        for (t, s) in trace.iter().zip(&shapes) {
            assert_eq!(t.shape(), s.as_slice());
        }
        assert_eq!(shapes.last().unwrap(), &vec![2, 3, 4, 6, 4]);
        assert!(infer_shapes(&g, &[1, 3, 4, 4, 4]).is_err());
    }

    #[test]
    fn weight_count_matches_graph_count() {
        let g = small_graph();
        let w = GraphWeights::zeros(&g);
        assert_eq!(w.param_count() as u64, super::super::count_params(&g).total);
        let out = rewrite(&g, 2, 2, RewriteOptions::default()).unwrap();
        let w = GraphWeights::zeros(&out.graph);
        assert_eq!(w.param_count() as u64, super::super::count_params(&out.graph).total);
    }

    #[test]
    fn flat_round_trip() {
        let g = small_graph();
        let w = GraphWeights::init(&g, &mut rng::seeded(3));
        let mut z = GraphWeights::zeros(&g);
        z.set_flat(&w.flatten()).unwrap();
        assert_eq!(z, w);
        assert!(z.set_flat(&[1.0]).is_err());
    }

    fn graph_gradcheck(g: &ModelGraph, seed: u64) -> (f64, f64) {
        let mut r = rng::seeded(seed);
        let w = GraphWeights::init(g, &mut r);
        let x = rng::uniform(&mut r, &[1, 2, 4, 4, 4], -1.0, 1.0);
        let trace = forward_trace(g, &w, &x).unwrap();
        let proj = rng::uniform(&mut r, trace.last().unwrap().shape(), -1.0, 1.0);
        let (gx, gw) = backward(g, &w, &trace, &proj).unwrap();
        let fx = finite_diff_grad(|x| forward(g, &w, x).unwrap().dot(&proj), &x, 1e-5).unwrap();
        let flat = Tensor::from_vec(&[w.param_count()], w.flatten()).unwrap();
        let fw = finite_diff_grad(
            |p| {
                let mut w2 = w.clone();
                w2.set_flat(p.data()).unwrap();
                forward(g, &w2, &x).unwrap().dot(&proj)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let aw = Tensor::from_vec(&[gw.param_count()], gw.flatten()).unwrap();
        (relative_error(&gx, &fx), relative_error(&aw, &fw))
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = small_graph();
        let rw = rewrite(&g, 2, 1, RewriteOptions::default()).unwrap().graph;
        for seed in 0..3 {
            for graph in [&g, &rw] {
                let (ex, ew) = graph_gradcheck(graph, seed);
                assert!(ex < 1e-4 && ew < 1e-4, "seed {seed}: {ex:e} {ew:e}");
            }
        }
    }

    #[test]
    fn unused_branches_get_zero_grads() {
        let g = ModelGraph::new(vec![
            Node::new("x", Op::Input { channels: 1 }, &[]),
            Node::new("c", Op::Conv3d(ConvSpec::same([3; 3], 1, 1)), &["x"]),
            Node::new("y", Op::Output, &["x"]),
        ])
        .unwrap();
        let w = GraphWeights::init(&g, &mut rng::seeded(0));
        let x = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let trace = forward_trace(&g, &w, &x).unwrap();
        let (gx, gw) = backward(&g, &w, &trace, &x).unwrap();
        assert_eq!(gx, x);
        assert!(gw.flatten().iter().all(|&v| v == 0.0));
    }
}
