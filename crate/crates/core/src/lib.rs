//! Guided multi-channel attention over multimodal ICU time series: ingest,
//! a small reverse-mode autodiff engine, the RAIM model family, a seeded
//! synthetic cohort generator and evaluation metrics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod synthgen;

pub use error::{Error, Result};
