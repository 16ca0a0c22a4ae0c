//! Dense `f64` tensors, a reverse-mode autodiff tape, and the AdamW optimizer
//! with global-norm gradient clipping.
//!
//! ```
//! use sskgqa_numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use tape::{Gradients, ParamGrads, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{len} values cannot fill a {rows}x{cols} tensor")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("backward needs a 1x1 loss, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("invalid {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

/// Row-wise softmax of a plain tensor, without recording anything.
pub fn softmax(x: &Tensor) -> Tensor {
    tape::softmax_rows(x)
}
