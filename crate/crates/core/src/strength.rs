//! IV strength matrix, λ̂min/√p and conditional F-statistics.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{pinv_symmetric, SymEigen};
use crate::scalar::{lit, to_f64, Real};
use crate::summary_data::Dataset;

/// Relative eigenvalue cutoff for the conditional-F normal equations.
const PINV_CUTOFF: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "")]
pub struct StrengthReport<T: Real> {
    #[serde(serialize_with = "ser_matrix")]
    pub strength_matrix: DMatrix<T>,
    pub lambda_min: f64,
    pub lambda_min_over_sqrt_p: f64,
    pub conditional_f: Vec<f64>,
    pub p: usize,
}

fn ser_matrix<T: Real, S: serde::Serializer>(m: &DMatrix<T>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| to_f64(m[(r, c)])).collect())
        .collect();
    serde::Serialize::serialize(&rows, s)
}

pub fn symmetric_sqrt<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let eig = SymEigen::new(a);
    if eig.min() < lit(-PSD_TOL) {
        return Err(Error::NotPsd(to_f64(eig.min())));
    }
    Ok(eig.map(|v| v.max(T::zero()).sqrt()))
}

fn inv_sqrt<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let eig = SymEigen::new(a);
    if !(eig.min() > T::zero()) {
        return Err(Error::NotPsd(to_f64(eig.min())));
    }
    Ok(eig.map(|v| T::one() / v.sqrt()))
}

/// Σ^{-1/2} (Σ_j t_j t_jᵀ) Σ^{-1/2} with t_j = γ_j / se_j, i.e. Σ_j Ω_j⁻¹γ_jγ_jᵀΩ_j⁻ᵀ.
fn strength_core<T: Real>(
    gammas: impl Iterator<Item = (DVector<T>, DVector<T>)>,
    correlation: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let k = correlation.nrows();
    let mut acc = DMatrix::<T>::zeros(k, k);
    for (g, se) in gammas {
        let t = g.component_div(&se);
        acc.ger(T::one(), &t, &t, T::one());
    }
    let w = inv_sqrt(correlation)?;
    let s = &w * acc * &w;
    Ok(crate::linalg::symmetrize(&s))
}

/// Sample strength matrix Σ_j Ω_j⁻¹γ̂_jγ̂_jᵀΩ_j⁻ᵀ − pI. `conditional_f` is left empty.
pub fn sample_strength_matrix<T: Real>(data: &Dataset<T>) -> Result<StrengthReport<T>> {
    let p = data.p();
    let k = data.k();
    let raw = strength_core(
        data.snps().iter().map(|s| (s.gamma_hat.clone(), s.se_x.clone())),
        data.correlation(),
    )?;
    let m = raw - DMatrix::<T>::identity(k, k) * lit::<T>(p as f64);
    let lambda_min = to_f64(SymEigen::new(&m).min());
    Ok(StrengthReport {
        strength_matrix: m,
        lambda_min,
        lambda_min_over_sqrt_p: lambda_min / (p as f64).sqrt(),
        conditional_f: Vec::new(),
        p,
    })
}

/// Population strength matrix Σ_j Ω_j⁻¹γ_jγ_jᵀΩ_j⁻ᵀ from true effects (rows of `gammas`).
pub fn true_strength_matrix<T: Real>(
    gammas: &DMatrix<T>,
    se_x: &DMatrix<T>,
    correlation: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if gammas.shape() != se_x.shape() || gammas.ncols() != correlation.nrows() {
        return Err(Error::Validation("gamma, SE and correlation shapes disagree".into()));
    }
    strength_core(
        (0..gammas.nrows()).map(|j| {
            (
                gammas.row(j).transpose().into_owned(),
                se_x.row(j).transpose().into_owned(),
            )
        }),
        correlation,
    )
}

/// Conditional F for exposure `k` (0-based). With `true_gammas` (p×K) the oracle version is returned.
pub fn conditional_f<T: Real>(
    data: &Dataset<T>,
    k: usize,
    true_gammas: Option<&DMatrix<T>>,
) -> Result<T> {
    let p = data.p();
    let kk = data.k();
    if k >= kk {
        return Err(Error::Validation(format!("exposure index {k} out of range for K = {kk}")));
    }
    if p < kk {
        return Err(Error::InsufficientData(format!("p = {p} < K = {kk}")));
    }
    if let Some(g) = true_gammas {
        if g.nrows() != p || g.ncols() != kk {
            return Err(Error::Validation(format!(
                "true gamma matrix is {}x{}, expected {p}x{kk}",
                g.nrows(),
                g.ncols()
            )));
        }
    }
    let gamma = |j: usize| -> DVector<T> {
        match true_gammas {
            Some(g) => g.row(j).transpose().into_owned(),
            None => data.snps()[j].gamma_hat.clone(),
        }
    };
    let others: Vec<usize> = (0..kk).filter(|&i| i != k).collect();
    let m = others.len();

    // weighted normal equations for δ₋k
    let mut xtx = DMatrix::<T>::zeros(m, m);
    let mut xty = DVector::<T>::zeros(m);
    for (j, s) in data.snps().iter().enumerate() {
        let g = gamma(j);
        let w = T::one() / (s.se_x[k] * s.se_x[k]);
        let x = DVector::from_iterator(m, others.iter().map(|&i| g[i]));
        xtx.ger(w, &x, &x, T::one());
        xty.axpy(w * g[k], &x, T::one());
    }
    let mut delta = DVector::<T>::zeros(kk);
    delta[k] = -T::one();
    if m > 0 {
        let sol = match crate::linalg::inverse_guarded(&xtx, "") {
            Ok(inv) => inv * xty,
            Err(_) => {
                let (pinv, rank) = pinv_symmetric(&xtx, PINV_CUTOFF);
                warn!(
                    "conditional F for exposure {}: collinear exposure effects (rank {rank} of {m}), using pseudo-inverse",
                    k + 1
                );
                pinv * xty
            }
        };
        for (slot, &i) in others.iter().enumerate() {
            delta[i] = sol[slot];
        }
    }

    let mut total = T::zero();
    for (j, s) in data.snps().iter().enumerate() {
        let g = gamma(j);
        let num = delta.dot(&g);
        let sx = s.sigma_x(data.correlation());
        let den = (sx * &delta).dot(&delta);
        if !(den > T::zero()) {
            return Err(Error::DegenerateDenominator { snp: s.id.clone() });
        }
        total += num * num / den;
    }
    Ok((total / lit::<T>((p - kk + 1) as f64)).max(T::zero()))
}

/// Strength matrix plus all K conditional F-statistics.
pub fn strength_report<T: Real>(data: &Dataset<T>) -> Result<StrengthReport<T>> {
    let mut r = sample_strength_matrix(data)?;
    r.conditional_f = (0..data.k())
        .map(|k| conditional_f(data, k, None).map(to_f64))
        .collect::<Result<_>>()?;
    Ok(r)
}
