//! Learning with noisy labels by estimating the label transition matrix on
//! every iteration from a class-balanced clean batch, using a two-head
//! classifier that shares one feature extractor, and correcting labels on
//! the fly.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: the two-head MLP, analytic gradients and SGD.
//! * [`data`]: synthetic blobs, splits, noise injection and batch samplers.
//! * [`transition`]: the transition-matrix estimator, oracles and bounds.
//! * [`train`]: the single-backprop training loop with label correction.
//! * [`baselines`]: reference procedures sharing the same evaluation code.
//! * [`metrics`]: accuracy, recovery, detection and confidence intervals.
//!
//! Data-parallel work goes through [`parallel`], which falls back to
//! sequential execution without the `parallel` feature or in strict mode.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod seed;
pub mod train;
pub mod transition;

pub use error::{Error, Result};
