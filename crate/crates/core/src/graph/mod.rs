//! Layer-level model graphs, the rewrite pass that swaps 3D convolutions
//! for `P_mSC_n` blocks, parameter counting, and a small executor used to
//! check shapes and to train.

mod exec;
mod rewrite;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::block::PscBlockSpec;
use crate::{ConvSpec, Error, Result};

pub use exec::{backward, forward, forward_trace, infer_shapes, GraphWeights, NodeParams};
pub use rewrite::{
    count_params, find_groups, rewrite, rewrite_report, ParamReport, ParamRow, ReplacedGroup, ReplacementGroup,
    RewriteOptions, RewriteOutcome, RewriteReport, SkippedGroup,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Input { channels: usize },
    Output,
    Conv3d(ConvSpec),
    Relu,
    MaxPool { window: [usize; 3], stride: [usize; 3] },
    Upsample { factor: [usize; 3] },
    Concat,
    Add,
    PscBlock(PscBlockSpec),
}

impl Op {
    pub const KINDS: [&'static str; 9] =
        ["input", "output", "conv3d", "relu", "maxpool", "upsample", "concat", "add", "psc_block"];

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Output => "output",
            Op::Conv3d(_) => "conv3d",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::Upsample { .. } => "upsample",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::PscBlock(_) => "psc_block",
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Input { .. } => (0, 0),
            Op::Concat => (1, usize::MAX),
            Op::Add => (2, usize::MAX),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Node {
        Node { id: id.into(), op, inputs: inputs.iter().map(|s| String::from(*s)).collect() }
    }
}

/// Nodes in topological order: every input refers to an earlier node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    nodes: Vec<Node>,
}

impl ModelGraph {
    pub fn new(nodes: Vec<Node>) -> Result<ModelGraph> {
        let g = ModelGraph { nodes };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<Node> {
        self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let (mut inputs, mut outputs) = (0, 0);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(Error::graph("", format!("node at position {i} has an empty id")));
            }
            let (lo, hi) = node.op.arity();
            if node.inputs.len() < lo || node.inputs.len() > hi {
                return Err(Error::graph(
                    &node.id,
                    format!(
                        "field \"inputs\": {} takes {lo}..{} inputs, got {}",
                        node.op.kind(),
                        if hi == usize::MAX { String::from("any") } else { format!("{hi}") },
                        node.inputs.len()
                    ),
                ));
            }
            for inp in &node.inputs {
                if !seen.contains_key(inp.as_str()) {
                    return Err(Error::graph(
                        &node.id,
                        format!("field \"inputs\": {inp:?} is not defined by an earlier node"),
                    ));
                }
            }
            match &node.op {
                Op::Input { channels } => {
                    inputs += 1;
                    if *channels == 0 {
                        return Err(Error::graph(&node.id, "field \"channels\" must be positive"));
                    }
                }
                Op::Output => outputs += 1,
                Op::Conv3d(spec) => spec.validate().map_err(|e| Error::graph(&node.id, format!("{e}")))?,
                Op::PscBlock(spec) => spec.validate().map_err(|e| Error::graph(&node.id, format!("{e}")))?,
                Op::MaxPool { window, stride } => {
                    if window.contains(&0) || stride.contains(&0) {
                        return Err(Error::graph(&node.id, "fields \"window\" and \"stride\" must be positive"));
                    }
                }
                Op::Upsample { factor } => {
                    if factor.contains(&0) {
                        return Err(Error::graph(&node.id, "field \"factor\" must be positive"));
                    }
                }
                Op::Relu | Op::Concat | Op::Add => {}
            }
            if seen.insert(&node.id, i).is_some() {
                return Err(Error::graph(&node.id, "duplicate node id"));
            }
        }
        if inputs != 1 || outputs != 1 {
            return Err(Error::graph(
                "",
                format!("a graph needs exactly one input and one output node (found {inputs} and {outputs})"),
            ));
        }
        Ok(())
    }

    /// Positions of the nodes consuming each node's output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let pos: BTreeMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut out = alloc::vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                out[pos[inp.as_str()]].push(i);
            }
        }
        out
    }

    pub(crate) fn input_positions(&self, i: usize) -> Vec<usize> {
        self.nodes[i].inputs.iter().map(|id| self.position(id).expect("validated graph")).collect()
    }

    pub fn input_channels(&self) -> usize {
        self.nodes
            .iter()
            .find_map(|n| match n.op {
                Op::Input { channels } => Some(channels),
                _ => None,
            })
            .expect("validated graph has an input")
    }
}
