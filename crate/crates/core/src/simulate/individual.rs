//! Individual-level genotype/phenotype simulation and the summary-statistic pipeline built on it.

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::rng::{lane, stream, Family, CONFIG_STREAM};
use crate::error::{Error, Result};
use crate::summary_data::estimate_shared_correlation;
use crate::{Dataset, SnpSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndividualParams {
    pub n: usize,
    pub p: usize,
    /// Number of non-null SNPs (the first `s`).
    pub s: usize,
    pub h2: f64,
    pub eta_x: f64,
    pub eta_y: f64,
    pub beta0: Vec<f64>,
    #[serde(default = "default_intercept")]
    pub intercept: f64,
    /// Selection p-value threshold; 0.01/K when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Null SNPs for Σ̂ have selection p-values at least this large for every exposure.
    #[serde(default = "default_null_p")]
    pub null_pvalue: f64,
}

fn default_intercept() -> f64 {
    10.0
}

fn default_null_p() -> f64 {
    0.5
}

impl Default for IndividualParams {
    fn default() -> Self {
        IndividualParams {
            n: 10_000,
            p: 2000,
            s: 1000,
            h2: 0.1,
            eta_x: 1.0,
            eta_y: 1.0,
            beta0: vec![1.0, -0.5, 0.5],
            intercept: 10.0,
            threshold: None,
            null_pvalue: 0.5,
        }
    }
}

impl IndividualParams {
    pub fn k(&self) -> usize {
        self.beta0.len()
    }

    pub fn selection_threshold(&self) -> f64 {
        self.threshold.unwrap_or(0.01 / self.k() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::Validation("beta0 must have at least one entry".into()));
        }
        if self.s > self.p {
            return Err(Error::Validation(format!("s = {} exceeds p = {}", self.s, self.p)));
        }
        if !(self.h2 > 0.0 && self.h2 < 1.0) {
            return Err(Error::Validation(format!("h2 = {} must lie in (0, 1)", self.h2)));
        }
        if self.n < 3 {
            return Err(Error::Validation("n must be at least 3".into()));
        }
        if self.p >= 1 << 24 {
            return Err(Error::Validation("p must be below 2^24".into()));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Validation(format!("threshold {t} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// γ_jk = φ_jk √(2h²/s) for j < s, zero otherwise; φ_jk standard normal, fixed by the seed.
pub fn true_gammas(params: &IndividualParams, seed: u64) -> DMatrix<f64> {
    let k = params.k();
    let scale = if params.s > 0 {
        (2.0 * params.h2 / params.s as f64).sqrt()
    } else {
        0.0
    };
    let mut rng = stream(seed, CONFIG_STREAM, lane(Family::IndividualEffects, 0, 0));
    let mut g = DMatrix::zeros(params.p, k);
    for j in 0..params.s.min(params.p) {
        for c in 0..k {
            let phi: f64 = StandardNormal.sample(&mut rng);
            g[(j, c)] = phi * scale;
        }
    }
    g
}

/// Per-SNP simple-regression summaries for m traits (rows SNPs, columns traits).
#[derive(Debug, Clone)]
pub struct TraitSummaries {
    pub beta: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub pvalue: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct IndividualDraw {
    pub exposure: TraitSummaries,
    pub outcome: TraitSummaries,
    pub selection: TraitSummaries,
}

#[derive(Clone, Copy)]
enum Cohort {
    Exposure = 0,
    Outcome = 1,
    Selection = 2,
}

/// Genotype = sum of two fair bits, i.e. P(0, 1, 2) = (1/4, 1/2, 1/4).
fn fill_genotypes(rng: &mut impl RngCore, out: &mut [u8]) {
    for chunk in out.chunks_mut(32) {
        let mut w = rng.next_u64();
        for g in chunk {
            *g = ((w & 1) + ((w >> 1) & 1)) as u8;
            w >>= 2;
        }
    }
}

#[inline]
fn axpy_u8(a: f64, z: &[u8], y: &mut [f64]) {
    for (yi, &zi) in y.iter_mut().zip(z) {
        *yi += a * zi as f64;
    }
}

#[inline]
fn dot_u8(z: &[u8], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let zc = z.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let (zr, yr) = (zc.remainder(), yc.remainder());
    for (zz, yy) in zc.zip(yc) {
        acc[0] += zz[0] as f64 * yy[0];
        acc[1] += zz[1] as f64 * yy[1];
        acc[2] += zz[2] as f64 * yy[2];
        acc[3] += zz[3] as f64 * yy[3];
    }
    let tail: f64 = zr.iter().zip(yr).map(|(&a, &b)| a as f64 * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn simulate_cohort(
    params: &IndividualParams,
    gamma: &DMatrix<f64>,
    seed: u64,
    rep: u64,
    cohort: Cohort,
    t_dist: &StudentsT,
) -> TraitSummaries {
    let (n, p, k) = (params.n, params.p, params.k());
    let sub = cohort as u64;
    let mut geno = vec![0u8; n * p];
    for j in 0..p {
        let mut rng = stream(seed, rep, lane(Family::Genotype, sub, j as u64));
        fill_genotypes(&mut rng, &mut geno[j * n..(j + 1) * n]);
    }

    let mut rng = stream(seed, rep, lane(Family::Noise, sub, 0));
    let sd_u = (0.6 * (1.0 - params.h2)).sqrt();
    let sd_e = (0.4 * (1.0 - params.h2)).sqrt();
    let nu = Normal::new(0.0, sd_u).expect("finite sd");
    let ne = Normal::new(0.0, sd_e).expect("finite sd");
    let u: Vec<f64> = (0..n).map(|_| nu.sample(&mut rng)).collect();
    let mut x: Vec<Vec<f64>> = (0..k)
        .map(|_| u.iter().map(|&ui| params.eta_x * ui + ne.sample(&mut rng)).collect())
        .collect();
    for j in 0..params.s.min(p) {
        let z = &geno[j * n..(j + 1) * n];
        for (kk, xk) in x.iter_mut().enumerate() {
            let g = gamma[(j, kk)];
            if g != 0.0 {
                axpy_u8(g, z, xk);
            }
        }
    }
    let traits: Vec<Vec<f64>> = match cohort {
        Cohort::Outcome => {
            let y = (0..n)
                .map(|i| {
                    let xb: f64 = (0..k).map(|kk| params.beta0[kk] * x[kk][i]).sum();
                    params.intercept + xb + params.eta_y * u[i] + ne.sample(&mut rng)
                })
                .collect();
            vec![y]
        }
        _ => x,
    };

    let m = traits.len();
    let nf = n as f64;
    let centered: Vec<Vec<f64>> = traits
        .iter()
        .map(|t| {
            let mean = t.iter().sum::<f64>() / nf;
            t.iter().map(|v| v - mean).collect()
        })
        .collect();
    let syy: Vec<f64> = centered.iter().map(|t| t.iter().map(|v| v * v).sum()).collect();
    let mut beta = DMatrix::zeros(p, m);
    let mut se = DMatrix::zeros(p, m);
    let mut pv = DMatrix::zeros(p, m);
    for j in 0..p {
        let z = &geno[j * n..(j + 1) * n];
        let (mut s1, mut s2) = (0u64, 0u64);
        for &g in z {
            s1 += g as u64;
            s2 += (g * g) as u64;
        }
        let sxx = s2 as f64 - (s1 as f64) * (s1 as f64) / nf;
        for t in 0..m {
            if sxx <= 0.0 {
                beta[(j, t)] = 0.0;
                se[(j, t)] = f64::INFINITY;
                pv[(j, t)] = 1.0;
                continue;
            }
            // centered trait, so Σ z (y − ȳ) needs no genotype centering
            let sxy = dot_u8(z, &centered[t]);
            let b = sxy / sxx;
            let rss = (syy[t] - b * sxy).max(0.0);
            let s = (rss / (nf - 2.0) / sxx).sqrt();
            beta[(j, t)] = b;
            se[(j, t)] = s;
            pv[(j, t)] = 2.0 * t_dist.sf((b / s).abs());
        }
    }
    TraitSummaries {
        beta,
        se,
        pvalue: pv,
    }
}

/// Exposure, outcome and selection cohorts for one replication.
pub fn generate_individual(
    params: &IndividualParams,
    gamma: &DMatrix<f64>,
    seed: u64,
    rep: u64,
) -> Result<IndividualDraw> {
    params.validate()?;
    if gamma.shape() != (params.p, params.k()) {
        return Err(Error::Validation("gamma matrix shape disagrees with (p, K)".into()));
    }
    let t = StudentsT::new(0.0, 1.0, params.n as f64 - 2.0)
        .map_err(|e| Error::Validation(e.to_string()))?;
    Ok(IndividualDraw {
        exposure: simulate_cohort(params, gamma, seed, rep, Cohort::Exposure, &t),
        outcome: simulate_cohort(params, gamma, seed, rep, Cohort::Outcome, &t),
        selection: simulate_cohort(params, gamma, seed, rep, Cohort::Selection, &t),
    })
}

/// SNPs whose p-value is at or below `threshold` for at least one trait.
pub fn select_ivs(selection: &TraitSummaries, threshold: f64) -> Result<Vec<usize>> {
    let keep: Vec<usize> = (0..selection.pvalue.nrows())
        .filter(|&j| selection.pvalue.row(j).iter().any(|&pv| pv <= threshold))
        .collect();
    if keep.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no SNP passes the selection threshold {threshold:e}"
        )));
    }
    Ok(keep)
}

/// SNPs with selection p-value ≥ `null_p` for every exposure.
pub fn null_snps(selection: &TraitSummaries, null_p: f64) -> Vec<usize> {
    (0..selection.pvalue.nrows())
        .filter(|&j| selection.pvalue.row(j).iter().all(|&pv| pv >= null_p))
        .collect()
}

/// Build the analysis dataset: selected SNPs from the exposure and outcome cohorts, with the
/// exposure correlation estimated from null-SNP Z-values of the exposure cohort.
pub fn assemble_dataset(draw: &IndividualDraw, selected: &[usize], null_p: f64) -> Result<Dataset> {
    let nulls = null_snps(&draw.selection, null_p);
    let k = draw.exposure.beta.ncols();
    let z = DMatrix::from_fn(nulls.len(), k, |r, c| {
        let j = nulls[r];
        draw.exposure.beta[(j, c)] / draw.exposure.se[(j, c)]
    });
    let corr = estimate_shared_correlation(&z)?;
    let snps = selected
        .iter()
        .map(|&j| {
            SnpSummary::new(
                format!("snp{}", j + 1),
                draw.exposure.beta.row(j).transpose(),
                draw.exposure.se.row(j).transpose(),
                draw.outcome.beta[(j, 0)],
                draw.outcome.se[(j, 0)],
                None,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(snps, corr)
}

/// Convenience: draw, select and assemble in one call.
pub fn individual_dataset(
    params: &IndividualParams,
    gamma: &DMatrix<f64>,
    seed: u64,
    rep: u64,
) -> Result<Dataset> {
    let draw = generate_individual(params, gamma, seed, rep)?;
    let sel = select_ivs(&draw.selection, params.selection_threshold())?;
    assemble_dataset(&draw, &sel, params.null_pvalue)
}
