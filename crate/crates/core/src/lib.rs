pub mod adversarial;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod perceptual;
pub mod service;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use tensor::Tensor;
