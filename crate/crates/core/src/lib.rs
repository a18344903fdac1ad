//! Hierarchical prompt decision transformer (HPDT) for offline meta-RL on
//! synthetic point-mass task families.
//!
//! The crate is organized bottom-up: tensors and a reverse-mode tape,
//! trajectory data and environments, prompt construction, the transformer
//! policy, and finally training and evaluation loops.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod envs;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{HpdtError, Result};

/// Version tag written into datasets, checkpoints and result files.
pub fn version_string() -> String {
    format!("hpdt {}", env!("CARGO_PKG_VERSION"))
}
