//! Attention-aware aggregation of crowdsourced class labels.
//!
//! Tasks carry feature vectors that feed a per-class Gaussian-process prior;
//! workers give noisy labels whose quality varies with their attention over
//! the course of their work. Inference uses expectation propagation inside a
//! generalized EM loop. Classic aggregators and a simulator for
//! attention-driven answer data are included for comparison.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod ep;
pub mod error;
pub mod gem;
pub mod kernels;
pub mod optim;
pub mod quadrature;
pub mod simulator;

pub use data::{AggregationResult, Dataset, Diagnostics, GoldLabels, Label};
pub use error::{Error, Result};
