//! Desk-scale few-shot image classification lab.
//!
//! Everything runs on a minimal f64 tensor/autodiff core over a procedurally
//! generated multi-domain image set, so episodic training, style-statistics
//! augmentation, spatial attention, cross-domain stylization, and
//! pseudo-label contrastive adaptation can all be exercised end to end on a
//! laptop CPU. See the crate examples for one runnable entry point per
//! capability, or the `fsl` binary for the config-driven experiment runner.

pub mod attention;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod cross_domain;
pub mod data;
pub mod protonet;
pub mod rng;
pub mod stylemix;
pub mod tensor;

pub use tensor::{Tensor, TensorError};

use thiserror::Error as ThisError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, ThisError)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
}
