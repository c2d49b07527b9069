//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as an append-only
//! list of nodes. [`Tape::backward`] then walks the list in reverse and
//! accumulates the gradient of a scalar root into every leaf.
//!
//! ```
//! use flowmatch::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let root = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Tapes are single-threaded and meant to live for one forward/backward
//! invocation. Only first-order derivatives are supported.

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{matmul_kernel, silu};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite tensor entry at index {index}")]
    NonFinite { index: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
