use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} would produce an empty output along dimension {dim}")]
    EmptyOutput { op: &'static str, dim: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("rank {rank} out of range 1..={extent} for mode {mode}")]
    RankOutOfRange { mode: usize, rank: usize, extent: usize },

    #[error("invalid slab assignment: {0}")]
    InvalidAssignment(String),

    #[error("cannot fuse kernels separable along different axes ({a:?} vs {b:?})")]
    AxisMismatch { a: crate::Axis, b: crate::Axis },

    #[error(
        "fusion of consecutive kernels is only defined for single-channel kernels (got C = {0}); \
         multichannel layers mix channels between the two convolutions"
    )]
    Multichannel(usize),

    #[error("invalid block: {0}")]
    InvalidBlock(String),

    #[error("node {node:?}: {msg}")]
    Graph { node: String, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    Diverged { epoch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn graph(node: &str, msg: impl Into<String>) -> Self {
        Error::Graph { node: node.into(), msg: msg.into() }
    }
}
