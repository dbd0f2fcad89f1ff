//! Direct RF SLAM on raw multi-antenna, multi-frequency measurements.
//!
//! The pieces, bottom up:
//!
//! - [`signal`]: frequency/array response vectors, calibration, path geometry.
//! - [`likelihood`]: the identity-plus-low-rank Gaussian likelihood and its
//!   analytic partials, with a dense reference implementation.
//! - [`scenario`]: image-source scenes, trajectories and synthetic frames.
//! - [`models`]: Markov transitions and priors of the latent states.
//! - [`filter`]: the stacked-particle sum-product tracker.
//! - [`neural`]: the MLP map from BS position to multipath features.
//! - [`learning`]: EM over the map parameters and the calibration.
//! - [`metrics`]: tracking, visibility and map-recovery scores.
//! - [`io`] and [`config`]: binary containers, CSV outputs, run configuration.

pub mod bench;
pub mod config;
pub mod error;
pub mod filter;
pub mod io;
pub mod learning;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod parallel;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
pub use num_complex::Complex64;
