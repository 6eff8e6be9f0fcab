pub mod autoencoder;
pub mod autograd;
pub mod config;
pub mod checkpoint;
pub mod degradation;
pub mod diffusion;
pub mod distillation;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
