//! Mixture-of-experts graph classifier for control flow graphs, with
//! gradient-based explanations and routing-aware evaluation.

pub mod autoencoder;
pub mod encoding;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
