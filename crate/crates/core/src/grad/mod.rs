//! Reverse-mode automatic differentiation over dense `f64` arrays, with just
//! enough layers to express small causal transformers and Gaussian heads.

mod checkpoint;
mod graph;
pub mod nn;
mod optim;
mod param;
mod tensor;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT};
pub use graph::{Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op} at node {node}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        node: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("embedding dim {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: variable does not belong to this graph")]
    ForeignVar { op: &'static str },
    #[error("backward called on a graph with no recorded forward pass")]
    NoForward,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Parameter-free causal self-attention over a `[time, dim]` sequence; the
/// input serves as queries, keys and values. See [`nn::CausalSelfAttention`]
/// for the projected layer.
pub fn causal_self_attention(g: &mut Graph, x: Var, heads: usize) -> Result<Var, GradError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(GradError::ShapeMismatch {
            op: "causal_self_attention",
            node: format!("#{}", g.len()),
            lhs: shape,
            rhs: vec![],
        });
    }
    let x3 = g.reshape(x, &[1, shape[0], shape[1]])?;
    let y = g.attention(x3, x3, x3, heads, None)?;
    g.reshape(y, &shape)
}
