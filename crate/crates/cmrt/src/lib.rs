//! Continual masked representation training toolkit.
//!
//! A desk-scale pipeline for masked acoustic modeling over residual
//! vector-quantized pseudo-tokens plus constant-Q spectrogram regression,
//! with two-stage continual pre-training, checkpoint merging via task
//! arithmetic, probing-based multi-label evaluation, and token-distribution
//! similarity analysis. Everything runs deterministically on synthetic
//! corpora with explicit seeds.

// Config validation uses `!(x > 0.0)` so that NaN is rejected along with
// non-positive values; `partial_cmp` rewrites would lose that guarantee.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod merge;
pub mod model;
pub mod plot;
pub mod probe;
pub mod rng;
pub mod similarity;
pub mod tensor;
pub mod trainer;
pub mod tokenizer;

pub use cli::run_cli;
pub use error::{Error, Result};
