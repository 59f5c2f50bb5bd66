//! Nearest-neighbor differential entropy of layer outputs, entropy-change
//! losses built on it, and a small deterministic training stack for
//! exercising them on synthetic data.

pub mod eloss;
pub mod entropy;
pub mod analysis;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod knn;
pub mod net;
pub mod optim;
pub mod samples;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
