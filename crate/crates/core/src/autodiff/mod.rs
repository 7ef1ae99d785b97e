//! Dense reverse-mode automatic differentiation.
//!
//! Every operation is recorded on an append-only [`Graph`] whenever one of
//! its inputs is attached to that graph. Vector-Jacobian products are written
//! in terms of the same [`OpKind`] primitives, so a gradient computed with
//! `create_graph = true` is itself a graph-attached tensor that can be
//! differentiated again (needed for the gradient penalty).

mod backward;
mod check;
mod kernels;
mod op;
mod tensor;

pub use backward::grad;
pub use check::{finite_diff, rel_close};
pub use op::OpKind;
pub use tensor::{concat, Graph, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: input outside the domain of the operation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("grad: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("grad: output is not attached to a graph")]
    DetachedOutput,
    #[error("grad: wrt tensor #{0} is not on the output's graph")]
    NotOnGraph(usize),
    #[error("{0}: inputs belong to different graphs")]
    GraphMismatch(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
