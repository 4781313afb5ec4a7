//! ModelGraph JSON: `{"version": 1, "nodes": [{"id", "op", "inputs", "attrs"}]}`.
//!
//! The canonical text form has sorted keys, two-space indentation and a
//! trailing newline; `serialize_model(parse_model(s))` reproduces any
//! canonical `s` byte for byte.

use psc_core::block::{subspace_filters, Orientation, PscBlockSpec};
use psc_core::graph::{ModelGraph, Node, Op};
use psc_core::{Axis, ConvSpec};
use serde_json::{json, Map, Value};

pub const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("field {field:?}: {msg}")]
    Document { field: String, msg: String },
    #[error("node {node:?}, field {field:?}: {msg}")]
    Node { node: String, field: String, msg: String },
    #[error("{0}")]
    Graph(String),
}

fn doc(field: &str, msg: impl Into<String>) -> FormatError {
    FormatError::Document { field: field.into(), msg: msg.into() }
}

struct Attrs<'a> {
    node: &'a str,
    map: &'a Map<String, Value>,
}

impl<'a> Attrs<'a> {
    fn err(&self, field: &str, msg: impl Into<String>) -> FormatError {
        FormatError::Node { node: self.node.into(), field: format!("attrs.{field}"), msg: msg.into() }
    }

    fn get(&self, field: &str) -> Result<&'a Value, FormatError> {
        self.map.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn usize(&self, field: &str) -> Result<usize, FormatError> {
        self.get(field)?.as_u64().map(|v| v as usize).ok_or_else(|| self.err(field, "expected a non-negative integer"))
    }

    fn positive(&self, field: &str) -> Result<usize, FormatError> {
        match self.usize(field)? {
            0 => Err(self.err(field, "must be positive")),
            v => Ok(v),
        }
    }

    fn bool(&self, field: &str) -> Result<bool, FormatError> {
        self.get(field)?.as_bool().ok_or_else(|| self.err(field, "expected a boolean"))
    }

    fn list(&self, field: &str) -> Result<Vec<usize>, FormatError> {
        self.get(field)?
            .as_array()
            .and_then(|a| a.iter().map(|v| v.as_u64().map(|u| u as usize)).collect())
            .ok_or_else(|| self.err(field, "expected a list of non-negative integers"))
    }

    fn triple(&self, field: &str) -> Result<[usize; 3], FormatError> {
        let v = self.list(field)?;
        v.as_slice().try_into().map_err(|_| self.err(field, format!("expected 3 values, got {}", v.len())))
    }

    fn positive_triple(&self, field: &str) -> Result<[usize; 3], FormatError> {
        let v = self.triple(field)?;
        if v.contains(&0) {
            return Err(self.err(field, "values must be positive"));
        }
        Ok(v)
    }

    fn only(&self, allowed: &[&str]) -> Result<(), FormatError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unknown attribute")),
            None => Ok(()),
        }
    }
}

fn axis_name(a: Axis) -> String {
    a.to_string()
}

fn parse_axis(attrs: &Attrs, field: &str, v: &Value) -> Result<Axis, FormatError> {
    match v.as_str() {
        Some("d1") => Ok(Axis::D1),
        Some("d2") => Ok(Axis::D2),
        Some("d3") => Ok(Axis::D3),
        _ => Err(attrs.err(field, format!("expected \"d1\", \"d2\" or \"d3\", got {v}"))),
    }
}

const CONV_KEYS: [&str; 6] = ["kernel", "in_ch", "out_ch", "stride", "pad", "bias"];
const BLOCK_KEYS: [&str; 12] = [
    "m",
    "n",
    "d",
    "in_ch",
    "out_ch",
    "M",
    "s",
    "per_stream_filters",
    "per_stream_out",
    "orientations",
    "stride",
    "pad",
];

fn parse_op(kind: &str, a: &Attrs) -> Result<Op, FormatError> {
    let op = match kind {
        "input" => {
            a.only(&["channels"])?;
            Op::Input { channels: a.positive("channels")? }
        }
        "output" | "relu" | "concat" | "add" => {
            a.only(&[])?;
            match kind {
                "output" => Op::Output,
                "relu" => Op::Relu,
                "concat" => Op::Concat,
                _ => Op::Add,
            }
        }
        "conv3d" => {
            a.only(&CONV_KEYS)?;
            let spec = ConvSpec::new(a.positive_triple("kernel")?, a.positive("in_ch")?, a.positive("out_ch")?)
                .with_stride(a.positive_triple("stride")?)
                .with_padding(a.triple("pad")?)
                .with_bias(a.bool("bias")?);
            Op::Conv3d(spec)
        }
        "maxpool" => {
            a.only(&["window", "stride"])?;
            Op::MaxPool { window: a.positive_triple("window")?, stride: a.positive_triple("stride")? }
        }
        "upsample" => {
            a.only(&["factor"])?;
            Op::Upsample { factor: a.positive_triple("factor")? }
        }
        "psc_block" => {
            a.only(&BLOCK_KEYS)?;
            Op::PscBlock(parse_block(a)?)
        }
        other => {
            return Err(FormatError::Node {
                node: a.node.into(),
                field: "op".into(),
                msg: format!("unknown op kind {other:?}; expected one of {}", Op::KINDS.join(", ")),
            })
        }
    };
    Ok(op)
}

fn parse_block(a: &Attrs) -> Result<PscBlockSpec, FormatError> {
    let orientations = a
        .get("orientations")?
        .as_array()
        .ok_or_else(|| a.err("orientations", "expected a list"))?
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let field = format!("orientations[{j}]");
            let axis = parse_axis(a, &field, o.get("axis").unwrap_or(&Value::Null))?;
            let plane = o.get("plane").and_then(Value::as_array).filter(|p| p.len() == 2);
            let plane = plane.ok_or_else(|| a.err(&field, "expected {\"axis\", \"plane\": [two axes]}"))?;
            Ok(Orientation { plane: [parse_axis(a, &field, &plane[0])?, parse_axis(a, &field, &plane[1])?], axis })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let spec = PscBlockSpec {
        m: a.positive("m")?,
        n: a.positive("n")?,
        d: a.positive("d")?,
        in_channels: a.positive("in_ch")?,
        out_channels: a.positive("out_ch")?,
        subspace_filters: a.positive("M")?,
        stream_divisor: a.positive("s")?,
        per_stream_filters: a.positive("per_stream_filters")?,
        per_stream_out: a.list("per_stream_out")?,
        orientations,
        stride: a.positive_triple("stride")?,
        padding: a.triple("pad")?,
    };
    let expect = subspace_filters(spec.out_channels, spec.in_channels, spec.d);
    if spec.subspace_filters != expect {
        return Err(
            a.err("M", format!("{} does not match the parameter-matching count {expect}", spec.subspace_filters))
        );
    }
    spec.validate().map_err(|e| a.err("m", e.to_string()))?;
    Ok(spec)
}

fn attrs_of(op: &Op) -> Value {
    match op {
        Op::Input { channels } => json!({ "channels": channels }),
        Op::Output | Op::Relu | Op::Concat | Op::Add => json!({}),
        Op::Conv3d(c) => json!({
            "kernel": c.kernel, "in_ch": c.in_channels, "out_ch": c.out_channels,
            "stride": c.stride, "pad": c.padding, "bias": c.bias,
        }),
        Op::MaxPool { window, stride } => json!({ "window": window, "stride": stride }),
        Op::Upsample { factor } => json!({ "factor": factor }),
        Op::PscBlock(b) => json!({
            "m": b.m, "n": b.n, "d": b.d, "in_ch": b.in_channels, "out_ch": b.out_channels,
            "M": b.subspace_filters, "s": b.stream_divisor, "per_stream_filters": b.per_stream_filters,
            "per_stream_out": b.per_stream_out,
            "orientations": b.orientations.iter().map(|o| json!({
                "axis": axis_name(o.axis), "plane": [axis_name(o.plane[0]), axis_name(o.plane[1])],
            })).collect::<Vec<_>>(),
            "stride": b.stride, "pad": b.padding,
        }),
    }
}

pub fn model_to_value(graph: &ModelGraph) -> Value {
    let nodes: Vec<Value> = graph
        .nodes()
        .iter()
        .map(|n| json!({ "id": n.id, "op": n.op.kind(), "inputs": n.inputs, "attrs": attrs_of(&n.op) }))
        .collect();
    json!({ "version": VERSION, "nodes": nodes })
}

/// Canonical text of a graph.
pub fn serialize_model(graph: &ModelGraph) -> String {
    let mut s = serde_json::to_string_pretty(&model_to_value(graph)).expect("values serialize");
    s.push('\n');
    s
}

pub fn parse_model(text: &str) -> Result<ModelGraph, FormatError> {
    let v: Value = serde_json::from_str(text).map_err(|e| FormatError::Syntax(e.to_string()))?;
    model_from_value(&v)
}

pub fn model_from_value(v: &Value) -> Result<ModelGraph, FormatError> {
    let top = v.as_object().ok_or_else(|| doc("", "expected an object"))?;
    if let Some(k) = top.keys().find(|k| *k != "version" && *k != "nodes") {
        return Err(doc(k, "unknown field"));
    }
    match top.get("version").and_then(Value::as_u64) {
        Some(VERSION) => {}
        _ => return Err(doc("version", format!("expected {VERSION}"))),
    }
    let list = top.get("nodes").and_then(Value::as_array).ok_or_else(|| doc("nodes", "expected a list"))?;
    let mut nodes = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let obj = item.as_object().ok_or_else(|| doc(&format!("nodes[{i}]"), "expected an object"))?;
        let id =
            obj.get("id").and_then(Value::as_str).ok_or_else(|| doc(&format!("nodes[{i}].id"), "expected a string"))?;
        let nerr = |field: &str, msg: &str| FormatError::Node { node: id.into(), field: field.into(), msg: msg.into() };
        if let Some(k) = obj.keys().find(|k| !["id", "op", "inputs", "attrs"].contains(&k.as_str())) {
            return Err(nerr(k, "unknown field"));
        }
        let kind = obj.get("op").and_then(Value::as_str).ok_or_else(|| nerr("op", "expected a string"))?;
        let inputs: Vec<String> = obj
            .get("inputs")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|s| s.as_str().map(String::from)).collect())
            .ok_or_else(|| nerr("inputs", "expected a list of node ids"))?;
        let empty = Map::new();
        let map = match obj.get("attrs") {
            None => &empty,
            Some(Value::Object(m)) => m,
            Some(_) => return Err(nerr("attrs", "expected an object")),
        };
        let op = parse_op(kind, &Attrs { node: id, map })?;
        nodes.push(Node { id: id.into(), op, inputs });
    }
    ModelGraph::new(nodes).map_err(|e| FormatError::Graph(e.to_string()))
}
