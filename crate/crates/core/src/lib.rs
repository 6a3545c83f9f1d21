//! Multi-scale patch message passing on top of a small windowed-attention
//! backbone, with the training loop, metrics and analysis tooling around it.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pmp;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
