//! Small dense reverse-mode gradient engine.
//!
//! The primitive set covers what the two encoders, the classifier heads and
//! the domain discriminators need, including gradients with respect to inputs.
//! All arithmetic is `f64`.

mod adam;
mod checkpoint;
mod params;
mod sparse;
mod tape;
mod tensor;

use std::path::PathBuf;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_HEADER};
pub use params::{Bound, Linear, ParamId, ParamStore};
pub use sparse::SparseMatrix;
pub use tape::{concat_cols, concat_rows, Gradients, Tape, Var, LOG_SIGMOID_CLAMP};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_rows};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("gradient for {name} has shape {grad:?}, parameter has {param:?}")]
    GradientShape {
        name: String,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
