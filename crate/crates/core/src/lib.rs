//! Trajectory similarity learning.
//!
//! The crate learns a trajectory encoder whose embedding distances
//! approximate a non-learned trajectory measure (DTW, discrete Fréchet or
//! EDwP). Training combines a weighted MSE on similarity values with a
//! kNN-guided pairwise ranking loss; evaluation reports kNN hit ratios.
//!
//! Module map:
//!
//! - [`geo`]: points, trajectories, cleaning, projection, point features,
//!   synthetic data and robustness perturbations.
//! - [`measures`]: DTW, discrete Fréchet, EDwP and ground-truth matrices.
//! - [`autodiff`]: a small reverse-mode tensor engine.
//! - [`model`]: the sub-view convolutional encoder and attention block.
//! - [`loss`]: predicted similarities, kNN-guided loss, weighted MSE.
//! - [`train`]: Adam, learning-rate schedule, the epoch loop.
//! - [`eval`]: rankings, HR@k, R10@50, the test protocol.
//! - [`formats`]: on-disk files (trajectory text, `TSIM`, `TEMB`, `TSCK`).
//! - [`config`]: the flat `key=value` run configuration.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geo;
pub mod loss;
pub mod measures;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
