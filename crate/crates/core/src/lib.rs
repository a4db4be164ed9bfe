pub mod ablation;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Sgd, Tape, Tensor, Var};
