//! Adversarial spatial-pyramid domain adaptation for road segmentation.
//!
//! The crate bundles a small reverse-mode differentiation engine, the
//! multi-stage pyramid network, the adversarial training loop, a pyramid
//! kernel-density likelihood, segmentation metrics and a synthetic two-domain
//! road-scene generator.

pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod likelihood;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pyramid;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use config::{Profile, RunConfig};
pub use error::{Error, Result};
pub use params::{adam_step, AdamConfig, AdamState, ParamFilter, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
