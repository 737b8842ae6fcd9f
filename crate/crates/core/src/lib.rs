pub mod analysis;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod ortho;
pub mod param;
pub mod spectral;
pub mod tensor;
pub mod transject;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
