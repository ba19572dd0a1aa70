//! A deliberately small differentiation kit: define-by-run tape over dense
//! vectors, the handful of layers the agents need, Adam/SGD, a binary
//! checkpoint format and a finite-difference gradient checker.
//!
//! Parameters are stored as `f32`; every forward and backward computation is
//! carried out in `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport, ParamError};
pub use graph::{Gradients, Graph, NodeId, MASKED_LOGP};
pub use layers::{Dense, Embedding, GruCell};
pub use loss::{argmax, cross_entropy, log_softmax, masked_log_softmax, softmax, PROB_FLOOR};
pub use optim::{optimizer_step, OptimConfig, OptimKind, OptimState};
pub use params::{ParamId, ParamStore};
pub use tensor::{dot, dot_wx, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
