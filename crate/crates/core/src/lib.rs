//! License plate recognition benchmarking toolkit.
//!
//! Builds and trains LPRNet from scratch with a CTC objective, scores
//! recognizers with sequence accuracy and Levenshtein distance, ranks
//! conflicting characters with Pareto tables, renders synthetic plates, and
//! benchmarks external OCR engines through the same evaluation path.

pub mod charset;
pub mod cli;
pub mod ctc;
pub mod error;
pub mod extocr;
pub mod imaging;
pub mod layers;
pub mod lprnet;
pub mod metrics;
pub mod optim;
pub mod pareto;
pub mod platesynth;
pub mod seed;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use charset::CharSet;
pub use error::{Error, Result};
pub use tensor::{ConvSpec, Shape4, Tensor4};
