//! Multi-modal group-cohesion regression.
//!
//! One epsilon-SVR is trained per feature modality (face, skeleton, scene).
//! Their predictions are fused either by a uniform average or by a grid
//! search over the weight simplex, and the result is scored by mean squared
//! error against 4-level cohesion labels.
//!
//! The crate is organised bottom-up:
//!
//! - [`feature_store`]: the feature-file format, face averaging, standardization
//! - [`dataset`]: labels, splits, label normalization, downsampling, synthetic data
//! - [`svr`]: kernels, the SMO dual solver, prediction and model persistence
//! - [`fusion`]: late fusion of per-modality predictions
//! - [`evaluation`]: MSE metrics, the experiment matrix and report rendering
//! - [`cli`]: the `cohesion` command-line tool

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod feature_store;
pub mod fusion;
mod numfmt;
pub mod svr;

pub use error::{Error, Result};
