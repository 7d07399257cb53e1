//! In-batch balancing regularization for bias-aware dense passage ranking.
//!
//! Modules, bottom up:
//! - [`corpus`]: passages, queries, runs, qrels, data pairs, synthetic data.
//! - [`bias`]: lexicon-based gender bias magnitude and labels.
//! - [`encoder`]: hashed bag-of-words dual encoder with analytic gradients.
//! - [`losses`]: ranking loss, nPRF, PD and TS regularizers.
//! - [`metrics`]: ranking and fairness metrics, paired bootstrap.
//! - [`trainer`]: optimization, lambda grid search, gradient checks.
//! - [`cli`]: the `ibbr` command line.

pub mod bias;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
