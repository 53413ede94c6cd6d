//! Noisy-label detection with a pair of low-rank adapters, followed by
//! denoised classifier training.

// NaN must fail the range checks, which `!(x > 0.0)` does.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod fnv;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod noise;
pub mod relabel;
pub mod rng;
pub mod stage2;

pub use error::{Error, Result};
