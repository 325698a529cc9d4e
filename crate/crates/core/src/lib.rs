//! Summary-data multivariable Mendelian randomization: MV-IVW, spectral-regularized IVW
//! (SRIVW) with pleiotropy and sample-overlap variants, weak-instrument diagnostics,
//! φ tuning, outlier screening and a Monte Carlo harness.
//!
//! The numeric kernel is generic over [`scalar::Real`]; the aliases below fix it to `f64`.

// NaN must fail range checks, so `!(x > 0.0)` is intended throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod scalar;
pub mod simulate;
pub mod strength;
pub mod summary_data;
pub mod tuning;

pub use error::{Error, Result};
pub use estimators::Method;

pub type Dataset = summary_data::Dataset<f64>;
pub type SnpSummary = summary_data::SnpSummary<f64>;
pub type Estimate = estimators::Estimate<f64>;
pub type StrengthReport = strength::StrengthReport<f64>;
pub type TuningResult = tuning::TuningResult<f64>;
