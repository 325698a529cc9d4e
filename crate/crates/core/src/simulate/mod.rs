//! Synthetic data generation and the Monte Carlo harness (f64 only).

pub mod config;
pub mod individual;
pub mod monte_carlo;
pub mod rng;
pub mod summary;
pub mod template;

pub use config::{Design, Mode, PhiRule, SimConfig};
pub use individual::{generate_individual, select_ivs, IndividualParams};
pub use monte_carlo::{generate_summary, monte_carlo, MetricsRow, MetricsTable};
pub use summary::{CausalPreset, StrengthPreset, SummarySampler, TrueModel};
