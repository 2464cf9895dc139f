//! Dense `f64` matrices, tape-based reverse-mode gradients and Adam.

mod checkpoint;
mod matrix;
mod params;
mod tape;

pub use checkpoint::Checkpoint;
pub use matrix::Matrix;
pub use params::{OptimizerState, ParamId, ParamStore};
pub use tape::{log_softmax2, Pooling, Segments, Tape, Var, PROB_FLOOR};

pub(crate) use params::hex;
