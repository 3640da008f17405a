//! Adversarial training of small convolutional classifiers against several
//! perturbation norms at once, with per-norm specialist members whose
//! convolution weights are produced by a shared-shape hypernetwork.

pub mod attacks;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod evaluation;
pub mod error;
pub mod hypernet;
pub mod model;
pub mod seed;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
