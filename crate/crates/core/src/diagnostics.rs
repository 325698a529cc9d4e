//! Per-SNP heterogeneity contributions and Bonferroni outlier exclusion.

use log::{info, warn};
use nalgebra::DVector;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};
use crate::summary_data::Dataset;
use crate::tuning::{q_contributions, select_phi, QMode, TuneMode};

#[derive(Debug, Clone, Serialize)]
pub struct OutlierReport {
    /// q_j from the first fit, in input order.
    pub contributions: Vec<f64>,
    pub snp_ids: Vec<String>,
    pub excluded_ids: Vec<String>,
    /// Threshold used in the last pass.
    pub threshold: f64,
    pub iterations: usize,
    pub phi_star: f64,
    pub q_total: f64,
}

pub fn snp_q_contributions<T: Real>(data: &Dataset<T>, beta: &DVector<T>) -> Result<DVector<T>> {
    Ok(DVector::from_vec(q_contributions(data, beta, QMode::Plain)?))
}

/// χ²₁ upper quantile at level alpha/p.
pub fn bonferroni_threshold(alpha: f64, p: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Validation(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    let chi = ChiSquared::new(1.0).expect("valid degrees of freedom");
    Ok(chi.inverse_cdf(1.0 - alpha / p as f64))
}

/// Fit tuned SRIVW, drop SNPs whose q_j exceeds the Bonferroni χ²₁ cutoff, refit, repeat up to
/// `max_iter` passes. Refuses (returning the current data) when exclusion would leave p ≤ K.
pub fn remove_outliers<T: Real>(
    data: &Dataset<T>,
    alpha: f64,
    max_iter: usize,
) -> Result<(Dataset<T>, OutlierReport)> {
    let mut current = data.clone();
    let mut excluded = Vec::new();
    let mut report: Option<OutlierReport> = None;
    let mut iterations = 0;
    let mut threshold = bonferroni_threshold(alpha, data.p())?;
    for _ in 0..max_iter {
        let fit = select_phi(&current, TuneMode::Plain)?;
        let q = snp_q_contributions(&current, &fit.selected_estimate.beta)?;
        threshold = bonferroni_threshold(alpha, current.p())?;
        if report.is_none() {
            report = Some(OutlierReport {
                contributions: q.iter().map(|&v| to_f64(v)).collect(),
                snp_ids: current.snps().iter().map(|s| s.id.clone()).collect(),
                excluded_ids: Vec::new(),
                threshold,
                iterations: 0,
                phi_star: to_f64(fit.phi_star),
                q_total: to_f64(q.sum()),
            });
        }
        iterations += 1;
        let cut: T = lit(threshold);
        let keep: Vec<usize> = (0..current.p()).filter(|&j| !(q[j] > cut)).collect();
        if keep.len() == current.p() {
            break;
        }
        if keep.len() <= current.k() {
            warn!(
                "excluding {} SNPs would leave {} <= K = {}; keeping the current set",
                current.p() - keep.len(),
                keep.len(),
                current.k()
            );
            break;
        }
        for j in (0..current.p()).filter(|j| !keep.contains(j)) {
            info!("excluding {} (q = {:.3}, threshold {threshold:.3})", current.snps()[j].id, q[j]);
            excluded.push(current.snps()[j].id.clone());
        }
        current = current.subset(&keep)?;
    }
    let mut report = report.unwrap_or(OutlierReport {
        contributions: Vec::new(),
        snp_ids: Vec::new(),
        excluded_ids: Vec::new(),
        threshold,
        iterations: 0,
        phi_star: 0.0,
        q_total: 0.0,
    });
    report.excluded_ids = excluded;
    report.iterations = iterations;
    report.threshold = threshold;
    Ok((current, report))
}
