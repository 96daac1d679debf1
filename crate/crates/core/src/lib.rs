pub mod attention;
pub mod autodiff;
pub mod bridge;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{Activation, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
