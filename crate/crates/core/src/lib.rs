//! Convolutional classifier whose attention branch doubles as a class activation map.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod stability;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{LfiCamModel, ModelConfig};
pub use tensor::{Scalar, Tensor};
