//! Summary-statistic draws around a fixed true model.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rng::{lane, stream, Family};
use super::template::Template;
use crate::error::{Error, Result};
use crate::linalg::cholesky_lower;
use crate::strength::true_strength_matrix;
use crate::{Dataset, SnpSummary};

/// Exposure correlation used by the summary-data designs.
pub fn default_correlation() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, -0.1, -0.05, -0.1, 1.0, 0.2, -0.05, 0.2, 1.0])
}

/// Joint (exposures, outcome) error correlation for the overlap design.
pub fn default_overlap_correlation() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, -0.1, -0.05, -0.2, //
            -0.1, 1.0, 0.2, 0.5, //
            -0.05, 0.2, 1.0, 0.4, //
            -0.2, 0.5, 0.4, 1.0,
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalPreset {
    BetaA,
    BetaB,
    Custom,
}

impl CausalPreset {
    pub fn beta0(self) -> Option<Vec<f64>> {
        match self {
            CausalPreset::BetaA => Some(vec![0.8, 0.4, 0.0]),
            CausalPreset::BetaB => Some(vec![0.1, -0.5, -0.9]),
            CausalPreset::Custom => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrengthPreset {
    /// Divide γ_j1 by D.
    FirstWeak,
    /// Divide every γ_jk by D.
    AllSimilar,
}

#[derive(Debug, Clone)]
pub struct TrueModel {
    /// p×K effects after the strength preset has been applied.
    pub gamma: DMatrix<f64>,
    pub se_x: DMatrix<f64>,
    pub se_y: DVector<f64>,
    pub correlation: DMatrix<f64>,
    pub beta0: DVector<f64>,
    /// Standard deviation of the balanced pleiotropic effects α_j.
    pub tau0: f64,
    /// (K+1)×(K+1) correlation of (γ̂_j, Γ̂_j) errors when samples overlap.
    pub overlap: Option<DMatrix<f64>>,
}

impl TrueModel {
    pub fn from_template(
        t: &Template,
        beta0: DVector<f64>,
        preset: StrengthPreset,
        divisor: f64,
        correlation: DMatrix<f64>,
        tau0: f64,
        overlap: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if !(divisor > 0.0) {
            return Err(Error::Validation(format!("divisor D = {divisor} must be > 0")));
        }
        let mut gamma = t.gamma.clone();
        match preset {
            StrengthPreset::FirstWeak => gamma.column_mut(0).unscale_mut(divisor),
            StrengthPreset::AllSimilar => gamma.unscale_mut(divisor),
        }
        let m = TrueModel {
            gamma,
            se_x: t.se_x.clone(),
            se_y: t.se_y.clone(),
            correlation,
            beta0,
            tau0,
            overlap,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, k) = self.gamma.shape();
        if self.se_x.shape() != (p, k) || self.se_y.len() != p {
            return Err(Error::Validation("true model SE shapes disagree with gamma".into()));
        }
        if self.beta0.len() != k {
            return Err(Error::Validation(format!("beta0 has length {}, expected {k}", self.beta0.len())));
        }
        if self.correlation.shape() != (k, k) {
            return Err(Error::Validation("correlation must be KxK".into()));
        }
        if !(self.tau0 >= 0.0) {
            return Err(Error::Validation("tau0 must be >= 0".into()));
        }
        if let Some(o) = &self.overlap {
            if o.shape() != (k + 1, k + 1) {
                return Err(Error::Validation("overlap correlation must be (K+1)x(K+1)".into()));
            }
            let top = o.view((0, 0), (k, k));
            if (top - &self.correlation).amax() > 1e-12 {
                return Err(Error::Validation(
                    "exposure block of the overlap correlation must equal the exposure correlation".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn mean_se_y(&self) -> f64 {
        self.se_y.mean()
    }

    pub fn lambda_min_over_sqrt_p(&self) -> Result<f64> {
        let s = true_strength_matrix(&self.gamma, &self.se_x, &self.correlation)?;
        Ok(crate::linalg::min_eigenvalue(&s) / (self.p() as f64).sqrt())
    }
}

/// Precomputed Cholesky factors for repeated draws.
#[derive(Debug, Clone)]
pub struct SummarySampler {
    truth: TrueModel,
    factors: Vec<DMatrix<f64>>,
    cov_xy: Option<Vec<DVector<f64>>>,
}

impl SummarySampler {
    pub fn new(truth: TrueModel) -> Result<Self> {
        truth.validate()?;
        let k = truth.k();
        let mut factors = Vec::with_capacity(truth.p());
        let mut covs = Vec::new();
        for j in 0..truth.p() {
            let mut sd: Vec<f64> = truth.se_x.row(j).iter().cloned().collect();
            match &truth.overlap {
                None => {
                    let s = DMatrix::from_fn(k, k, |a, b| sd[a] * sd[b] * truth.correlation[(a, b)]);
                    factors.push(cholesky_lower(&s)?);
                }
                Some(o) => {
                    sd.push(truth.se_y[j]);
                    let xi = DMatrix::from_fn(k + 1, k + 1, |a, b| sd[a] * sd[b] * o[(a, b)]);
                    covs.push(xi.view((0, k), (k, 1)).column(0).into_owned());
                    factors.push(cholesky_lower(&xi)?);
                }
            }
        }
        Ok(SummarySampler {
            cov_xy: truth.overlap.as_ref().map(|_| covs),
            truth,
            factors,
        })
    }

    pub fn truth(&self) -> &TrueModel {
        &self.truth
    }

    /// One replication: γ̂_j ~ N(γ_j, Σ_Xj), Γ̂_j ~ N(γ_jᵀβ₀ + α_j, σ_Yj²), α_j ~ N(0, τ₀²).
    pub fn draw(&self, seed: u64, rep: u64) -> Result<Dataset> {
        let t = &self.truth;
        let k = t.k();
        let overlap = t.overlap.is_some();
        let mut snps = Vec::with_capacity(t.p());
        for j in 0..t.p() {
            let mut rng = stream(seed, rep, lane(Family::SummarySnp, 0, j as u64));
            let dim = if overlap { k + 1 } else { k };
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let alpha: f64 = if t.tau0 > 0.0 {
                t.tau0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            let gamma = t.gamma.row(j).transpose();
            let mean_y = gamma.dot(&t.beta0) + alpha;
            let noise = &self.factors[j] * &z;
            let (gh, gy) = if overlap {
                (&gamma + noise.rows(0, k), mean_y + noise[k])
            } else {
                let ey: f64 = StandardNormal.sample(&mut rng);
                (&gamma + &noise, mean_y + t.se_y[j] * ey)
            };
            snps.push(SnpSummary::new(
                format!("snp{}", j + 1),
                gh,
                t.se_x.row(j).transpose(),
                gy,
                t.se_y[j],
                self.cov_xy.as_ref().map(|c| c[j].clone()),
            )?);
        }
        Dataset::new(snps, t.correlation.clone())
    }
}
