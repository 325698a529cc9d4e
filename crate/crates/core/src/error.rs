use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("ill-conditioned system (condition number {condition:.3e} > {limit:.0e}); {hint}")]
    IllConditioned {
        condition: f64,
        limit: f64,
        hint: &'static str,
    },

    #[error("eigenvalue {eigenvalue:.3e} is numerically zero, R_phi is undefined for phi = {phi:.3e}")]
    DegenerateSpectrum { eigenvalue: f64, phi: f64 },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("tuning failed: no grid value gave a finite Q statistic")]
    TuningFailed,

    #[error("non-positive heterogeneity denominator at SNP {snp}")]
    DegenerateDenominator { snp: String },

    #[error("{method}: {failures} of {reps} replications failed (limit is 1%), first error: {first}")]
    TooManyFailures {
        method: String,
        failures: usize,
        reps: usize,
        first: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for problems with user input, as opposed to numerical or internal failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::InsufficientData(_)
                | Error::Config(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
