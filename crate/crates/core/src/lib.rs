//! Spectral parameter sharing for cooperative multi-agent Q-learning.
//!
//! Agents share one SVD-parameterized network `W = U diag(s) Vᵀ`; each agent
//! gates the non-shared part of the spectrum with its own learnable mask.
//! The crate also carries the baselines it is compared against, the
//! closed-form parameter accounting, two toy environments, and the
//! evaluation statistics.

pub mod autodiff;
pub mod error;
pub mod matrix;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod numfmt;
pub mod spectral;
pub mod regularize;
pub mod schemes;
pub mod budget;
pub mod envs;
pub mod train;
pub mod report;
