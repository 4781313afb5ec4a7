use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ModelGraph, Node, Op};
use crate::block::{block_param_count, build_block, PscBlockSpec};
use crate::{ConvSpec, Result};

/// A chain of 3D convolutions that one block may replace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacementGroup {
    pub node_ids: Vec<String>,
    /// Ids of the ReLU nodes between consecutive convolutions.
    pub relu_ids: Vec<String>,
    /// Whether a ReLU sits between convolution `i` and `i + 1`.
    pub interleaved_relu: Vec<bool>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernels: Vec<[usize; 3]>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ReplacementGroup {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

fn conv_of(node: &Node) -> Option<&ConvSpec> {
    match &node.op {
        Op::Conv3d(c) if c.kernel != [1, 1, 1] => Some(c),
        _ => None,
    }
}

/// Maximal chains of non-pointwise 3D convolutions, optionally linked
/// through a single ReLU, that never pass a node with several consumers.
/// Chains longer than `max_len` are cut greedily from the front.
pub fn find_groups(graph: &ModelGraph, max_len: Option<usize>) -> Vec<ReplacementGroup> {
    let nodes = graph.nodes();
    let consumers = graph.consumers();
    let next_in_chain = |i: usize| -> Option<(usize, Option<usize>)> {
        let [c] = consumers[i].as_slice() else { return None };
        match nodes[*c].op {
            Op::Conv3d(_) if conv_of(&nodes[*c]).is_some() => Some((*c, None)),
            Op::Relu => {
                let [c2] = consumers[*c].as_slice() else { return None };
                conv_of(&nodes[*c2]).map(|_| (*c2, Some(*c)))
            }
            _ => None,
        }
    };
    let mut taken = BTreeSet::new();
    let mut groups = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        if taken.contains(&i) || conv_of(node).is_none() {
            continue;
        }
        let mut chain = alloc::vec![(i, None)];
        let mut cur = i;
        while let Some((nxt, relu)) = next_in_chain(cur) {
            chain.push((nxt, relu));
            cur = nxt;
        }
        taken.extend(chain.iter().map(|c| c.0));
        let seg = max_len.unwrap_or(usize::MAX).max(1);
        for part in chain.chunks(seg) {
            groups.push(make_group(nodes, part));
        }
    }
    groups
}

fn make_group(nodes: &[Node], part: &[(usize, Option<usize>)]) -> ReplacementGroup {
    let convs: Vec<&ConvSpec> = part.iter().map(|&(i, _)| conv_of(&nodes[i]).expect("chain holds convs")).collect();
    let first = convs[0];
    ReplacementGroup {
        node_ids: part.iter().map(|&(i, _)| nodes[i].id.clone()).collect(),
        relu_ids: part[1..].iter().filter_map(|&(_, r)| r.map(|r| nodes[r].id.clone())).collect(),
        interleaved_relu: part[1..].iter().map(|&(_, r)| r.is_some()).collect(),
        in_channels: first.in_channels,
        out_channels: convs[convs.len() - 1].out_channels,
        kernels: convs.iter().map(|c| c.kernel).collect(),
        stride: first.stride,
        padding: first.padding,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RewriteOptions {
    /// Longest group a single block may replace; unbounded when `None`.
    pub max_len: Option<usize>,
    /// Give every stream the full filter budget instead of `1/m` of it.
    pub undivided: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacedGroup {
    pub group: ReplacementGroup,
    pub block_id: String,
    pub spec: PscBlockSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedGroup {
    pub group: ReplacementGroup,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteOutcome {
    pub graph: ModelGraph,
    pub replaced: Vec<ReplacedGroup>,
    pub skipped: Vec<SkippedGroup>,
}

fn block_for(
    group: &ReplacementGroup,
    m: usize,
    n: usize,
    opts: RewriteOptions,
) -> core::result::Result<PscBlockSpec, String> {
    let k = group.kernels[0];
    if group.kernels.iter().any(|&j| j != k) {
        return Err(format!("mixed kernel sizes {:?}", group.kernels));
    }
    if k[0] != k[1] || k[1] != k[2] {
        return Err(format!("kernel {k:?} is not cubic"));
    }
    let d = k[0];
    if d.is_multiple_of(2) && group.len() > 1 {
        return Err(format!("even kernel extent {d} cannot keep inner layers shape-preserving"));
    }
    if group.out_channels < m {
        return Err(format!("{} output channels cannot feed {m} streams", group.out_channels));
    }
    let block = build_block(m, n, d, group.in_channels, group.out_channels)
        .map_err(|e| format!("{e}"))?
        .with_geometry(group.stride, group.padding);
    Ok(if opts.undivided { block.with_undivided_streams() } else { block })
}

fn check_inner(graph: &ModelGraph, group: &ReplacementGroup) -> core::result::Result<(), String> {
    for id in &group.node_ids[1..] {
        let Some(Op::Conv3d(c)) = graph.node(id).map(|n| &n.op) else { continue };
        let same = c.kernel.map(|j| (j - 1) / 2);
        if c.stride != [1; 3] || c.padding != same || c.kernel.iter().any(|j| j % 2 == 0) {
            return Err(format!("conv {id:?} inside the group is not a stride-1 same-padded layer"));
        }
    }
    Ok(())
}

/// Replaces every eligible group with one `P_mSC_n` block node. The block
/// takes the id and position of the group's last convolution and the
/// inputs of its first.
pub fn rewrite(graph: &ModelGraph, m: usize, n: usize, opts: RewriteOptions) -> Result<RewriteOutcome> {
    build_block(m, n, 3, 1, m)?;
    let mut replaced = Vec::new();
    let mut skipped = Vec::new();
    for group in find_groups(graph, opts.max_len) {
        match check_inner(graph, &group).and_then(|_| block_for(&group, m, n, opts)) {
            Ok(spec) => {
                let block_id = group.node_ids[group.len() - 1].clone();
                replaced.push(ReplacedGroup { group, block_id, spec });
            }
            Err(reason) => skipped.push(SkippedGroup { group, reason }),
        }
    }
    let mut dropped = BTreeSet::new();
    for r in &replaced {
        let g = &r.group;
        dropped.extend(g.node_ids[..g.len() - 1].iter().cloned());
        dropped.extend(g.relu_ids.iter().cloned());
    }
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        if dropped.contains(&node.id) {
            continue;
        }
        match replaced.iter().find(|r| r.block_id == node.id) {
            Some(r) => {
                let first = graph.node(&r.group.node_ids[0]).expect("group ids exist");
                nodes.push(Node {
                    id: node.id.clone(),
                    op: Op::PscBlock(r.spec.clone()),
                    inputs: first.inputs.clone(),
                });
            }
            None => nodes.push(node.clone()),
        }
    }
    let graph = ModelGraph::new(nodes)?;
    Ok(RewriteOutcome { graph, replaced, skipped })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub id: String,
    pub kind: &'static str,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: u64,
}

pub fn node_params(op: &Op) -> u64 {
    match op {
        Op::Conv3d(c) => c.param_count(),
        Op::PscBlock(b) => block_param_count(b),
        _ => 0,
    }
}

pub fn count_params(graph: &ModelGraph) -> ParamReport {
    let rows: Vec<ParamRow> = graph
        .nodes()
        .iter()
        .map(|n| ParamRow { id: n.id.clone(), kind: n.op.kind(), params: node_params(&n.op) })
        .collect();
    let total = rows.iter().map(|r| r.params).sum();
    ParamReport { rows, total }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteReport {
    pub total_before: u64,
    pub total_after: u64,
    /// `100 * (before - after) / before`, negative when the graph grew.
    pub reduction_pct: f64,
    pub groups_replaced: usize,
    pub groups_skipped: usize,
}

pub fn rewrite_report(before: &ModelGraph, outcome: &RewriteOutcome) -> RewriteReport {
    let total_before = count_params(before).total;
    let total_after = count_params(&outcome.graph).total;
    let reduction_pct =
        if total_before == 0 { 0.0 } else { 100.0 * (total_before as f64 - total_after as f64) / total_before as f64 };
    RewriteReport {
        total_before,
        total_after,
        reduction_pct,
        groups_replaced: outcome.replaced.len(),
        groups_skipped: outcome.skipped.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn conv(id: &str, cin: usize, cout: usize, input: &str) -> Node {
        Node::new(id, Op::Conv3d(ConvSpec::same([3; 3], cin, cout).with_bias(true)), &[input])
    }

    fn graph(nodes: Vec<Node>) -> ModelGraph {
        ModelGraph::new(nodes).unwrap()
    }

    fn ids(g: &ReplacementGroup) -> Vec<&str> {
        g.node_ids.iter().map(String::as_str).collect()
    }

    #[test]
    fn groups_stop_at_pooling() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 2 }, &[]),
            conv("c1", 2, 4, "x"),
            Node::new("r1", Op::Relu, &["c1"]),
            conv("c2", 4, 4, "r1"),
            Node::new("p", Op::MaxPool { window: [2; 3], stride: [2; 3] }, &["c2"]),
            conv("c3", 4, 4, "p"),
            Node::new("y", Op::Output, &["c3"]),
        ]);
        let groups = find_groups(&g, Some(2));
        assert_eq!(groups.len(), 2);
        assert_eq!(ids(&groups[0]), ["c1", "c2"]);
        assert_eq!(groups[0].interleaved_relu, [true]);
        assert_eq!(groups[0].relu_ids, ["r1"]);
        assert_eq!((groups[0].in_channels, groups[0].out_channels), (2, 4));
        assert_eq!(ids(&groups[1]), ["c3"]);
    }

    #[test]
    fn no_convs_no_groups() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 2 }, &[]),
            Node::new("p", Op::MaxPool { window: [2; 3], stride: [2; 3] }, &["x"]),
            Node::new("y", Op::Output, &["p"]),
        ]);
        assert!(find_groups(&g, None).is_empty());
        let out = rewrite(&g, 1, 1, RewriteOptions::default()).unwrap();
        assert_eq!(out.graph, g);
        let rep = rewrite_report(&g, &out);
        assert_eq!((rep.total_before, rep.total_after, rep.reduction_pct), (0, 0, 0.0));
    }

    fn residual() -> ModelGraph {
        graph(vec![
            Node::new("x", Op::Input { channels: 4 }, &[]),
            conv("c1", 4, 4, "x"),
            Node::new("r1", Op::Relu, &["c1"]),
            conv("c2", 4, 4, "r1"),
            Node::new("a", Op::Add, &["c2", "x"]),
            conv("c3", 4, 4, "a"),
            Node::new("y", Op::Output, &["c3"]),
        ])
    }

    #[test]
    fn merge_node_splits_chain() {
        let groups = find_groups(&residual(), None);
        assert_eq!(groups.iter().map(ids).collect::<Vec<_>>(), [vec!["c1", "c2"], vec!["c3"]]);
    }

    #[test]
    fn branch_splits_chain() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 4 }, &[]),
            conv("c1", 4, 4, "x"),
            conv("c2", 4, 4, "c1"),
            conv("c3", 4, 4, "c1"),
            Node::new("k", Op::Concat, &["c2", "c3"]),
            Node::new("y", Op::Output, &["k"]),
        ]);
        let groups = find_groups(&g, None);
        assert_eq!(groups.iter().map(ids).collect::<Vec<_>>(), [vec!["c1"], vec!["c2"], vec!["c3"]]);
    }

    #[test]
    fn pointwise_never_grouped() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 4 }, &[]),
            Node::new("c", Op::Conv3d(ConvSpec::new([1; 3], 4, 4)), &["x"]),
            Node::new("y", Op::Output, &["c"]),
        ]);
        assert!(find_groups(&g, None).is_empty());
    }

    #[test]
    fn single_conv_becomes_block() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 64 }, &[]),
            conv("c", 64, 64, "x"),
            Node::new("y", Op::Output, &["c"]),
        ]);
        assert_eq!(count_params(&g).total, 110_656);
        let out = rewrite(&g, 1, 1, RewriteOptions::default()).unwrap();
        let Op::PscBlock(b) = &out.graph.node("c").unwrap().op else { panic!("not replaced") };
        assert_eq!(b.subspace_filters, 144);
        assert_eq!(count_params(&out.graph).total, 110_656);
    }

    #[test]
    fn vgg_pair_becomes_one_block() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 8 }, &[]),
            conv("c1", 8, 16, "x"),
            Node::new("r1", Op::Relu, &["c1"]),
            conv("c2", 16, 16, "r1"),
            Node::new("r2", Op::Relu, &["c2"]),
            Node::new("y", Op::Output, &["r2"]),
        ]);
        let out = rewrite(&g, 1, 2, RewriteOptions::default()).unwrap();
        assert_eq!(out.replaced.len(), 1);
        let kinds: Vec<_> = out.graph.nodes().iter().map(|n| (n.id.as_str(), n.op.kind())).collect();
        assert_eq!(kinds, [("x", "input"), ("c2", "psc_block"), ("r2", "relu"), ("y", "output")]);
        let block = out.graph.node("c2").unwrap();
        assert_eq!(block.inputs, ["x"]);
        let Op::PscBlock(b) = &block.op else { unreachable!() };
        assert_eq!((b.n, b.in_channels, b.out_channels), (2, 8, 16));
    }

    #[test]
    fn skip_reasons() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 4 }, &[]),
            Node::new("c1", Op::Conv3d(ConvSpec::same([3, 5, 5], 4, 4)), &["x"]),
            Node::new("p", Op::MaxPool { window: [1; 3], stride: [1; 3] }, &["c1"]),
            conv("c2", 4, 4, "p"),
            Node::new("c3", Op::Conv3d(ConvSpec::same([5; 3], 4, 4)), &["c2"]),
            Node::new("p2", Op::MaxPool { window: [1; 3], stride: [1; 3] }, &["c3"]),
            conv("c4", 4, 2, "p2"),
            Node::new("p3", Op::MaxPool { window: [1; 3], stride: [1; 3] }, &["c4"]),
            conv("c5", 2, 2, "p3"),
            Node::new("c6", Op::Conv3d(ConvSpec::same([3; 3], 2, 2).with_stride([2; 3])), &["c5"]),
            Node::new("y", Op::Output, &["c6"]),
        ]);
        let out = rewrite(&g, 3, 1, RewriteOptions::default()).unwrap();
        assert!(out.replaced.is_empty());
        let reasons: Vec<&str> = out.skipped.iter().map(|s| s.reason.as_str()).collect();
        assert!(reasons[0].contains("not cubic"));
        assert!(reasons[1].contains("mixed"));
        assert!(reasons[2].contains("streams"));
        assert!(reasons[3].contains("stride-1"));
        assert_eq!(out.graph, g);
    }

    #[test]
    fn stride_moves_into_block() {
        let g = graph(vec![
            Node::new("x", Op::Input { channels: 4 }, &[]),
            Node::new("c", Op::Conv3d(ConvSpec::new([3; 3], 4, 6).with_stride([1, 2, 2]).with_padding([1; 3])), &["x"]),
            Node::new("y", Op::Output, &["c"]),
        ]);
        let out = rewrite(&g, 3, 1, RewriteOptions::default()).unwrap();
        let Op::PscBlock(b) = &out.graph.node("c").unwrap().op else { panic!() };
        assert_eq!((b.stride, b.padding), ([1, 2, 2], [1; 3]));
        assert_eq!(b.output_extents([5, 8, 7]).unwrap(), [5, 4, 4]);
    }

    #[test]
    fn idempotent_and_conserving() {
        let g = residual();
        let once = rewrite(&g, 2, 2, RewriteOptions::default()).unwrap();
        let twice = rewrite(&once.graph, 2, 2, RewriteOptions::default()).unwrap();
        assert_eq!(once.graph, twice.graph);
        assert!(twice.replaced.is_empty());
        for id in ["x", "a", "y"] {
            assert_eq!(g.node(id), once.graph.node(id));
        }
    }

    #[test]
    fn undivided_option() {
        let g = residual();
        let opts = RewriteOptions { max_len: Some(1), undivided: true };
        let out = rewrite(&g, 2, 1, opts).unwrap();
        assert_eq!(out.replaced.len(), 3);
        for r in &out.replaced {
            assert_eq!(r.spec.per_stream_filters, r.spec.subspace_filters);
        }
    }
}
