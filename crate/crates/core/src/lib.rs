pub mod codec;
pub mod error;
mod fft;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod operators;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
