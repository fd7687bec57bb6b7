//! Context-aware visual grounding for driving commands.
//!
//! A region-scoring model that reads a free-form command, classifies its
//! emotional register, encodes the scene's region proposals and patch grid,
//! and ranks regions with a cross-modal encoder followed by a layer-attention
//! decoder. Everything runs on a small reverse-mode autodiff engine over
//! `f64` matrices.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, TrainConfig};
pub use data::{BBox, Dataset, Sample, Scene};
pub use decoder::Prediction;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
