//! Choice of φ by minimizing the Q-statistic over the grid B.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::debug;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimators::{srivw_from_system, Estimate, Method, SrivwSystem};
use crate::scalar::{lit, to_f64, Real};
use crate::strength::sample_strength_matrix;
use crate::summary_data::Dataset;

pub const DEFAULT_C: f64 = 17.0;
pub const DEFAULT_STEP: f64 = 0.5;
/// λ̂min/√p below this is flagged as weak.
pub const WEAK_IV_THRESHOLD: f64 = 7.0;
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QMode {
    Plain,
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    Plain,
    Pleiotropy,
    Overlap,
}

impl TuneMode {
    pub fn method(self) -> Method {
        match self {
            TuneMode::Plain => Method::Srivw,
            TuneMode::Pleiotropy => Method::SrivwPleiotropy,
            TuneMode::Overlap => Method::SrivwOverlap,
        }
    }

    pub fn for_method(m: Method) -> Option<Self> {
        match m {
            Method::MvIvw => None,
            Method::Srivw => Some(TuneMode::Plain),
            Method::SrivwPleiotropy => Some(TuneMode::Pleiotropy),
            Method::SrivwOverlap => Some(TuneMode::Overlap),
        }
    }

    fn q_mode(self) -> QMode {
        match self {
            TuneMode::Overlap => QMode::Overlap,
            _ => QMode::Plain,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridOptions {
    pub c: f64,
    pub step: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            c: DEFAULT_C,
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuningResult<T: Real> {
    pub phi_star: T,
    /// Grid points that produced a finite Q, ascending in φ.
    pub q_values: Vec<(T, T)>,
    pub grid_upper_exponent: f64,
    pub lambda_min_over_sqrt_p: f64,
    pub selected_estimate: Estimate<T>,
}

/// {0} ∪ {exp(i − λ) : i = 0, step, …, c}. Values that underflow to zero are dropped,
/// which only happens for λ above roughly 700.
pub fn grid_b(lambda_min_over_sqrt_p: f64, c: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "grid step must be positive");
    let n = (c / step + 1e-9).floor().max(-1.0) as i64;
    let mut grid = vec![0.0];
    for i in 0..=n {
        let v = (i as f64 * step - lambda_min_over_sqrt_p).exp();
        if v > *grid.last().unwrap() {
            grid.push(v);
        }
    }
    grid
}

fn q_terms<T: Real>(data: &Dataset<T>, beta: &DVector<T>, mode: QMode) -> Result<Vec<T>> {
    if mode == QMode::Overlap && !data.has_overlap() {
        return Err(Error::Validation("overlap Q needs cov_xy for every SNP".into()));
    }
    if beta.len() != data.k() {
        return Err(Error::Validation(format!(
            "beta has length {}, expected {}",
            beta.len(),
            data.k()
        )));
    }
    data.snps()
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let r = s.gamma_y_hat - s.gamma_hat.dot(beta);
            let mut den = s.se_y * s.se_y + (data.sigma_x(j) * beta).dot(beta);
            if mode == QMode::Overlap {
                if let Some(c) = &s.cov_xy {
                    den -= lit::<T>(2.0) * beta.dot(c);
                }
            }
            if !(den > T::zero()) {
                return Err(Error::DegenerateDenominator { snp: s.id.clone() });
            }
            Ok(r * r / den)
        })
        .collect()
}

/// Per-SNP standardized squared residuals, in dataset order.
pub fn q_contributions<T: Real>(data: &Dataset<T>, beta: &DVector<T>, mode: QMode) -> Result<Vec<T>> {
    q_terms(data, beta, mode)
}

pub fn q_statistic<T: Real>(data: &Dataset<T>, beta: &DVector<T>, mode: QMode) -> Result<T> {
    Ok(q_terms(data, beta, mode)?.into_iter().fold(T::zero(), |a, b| a + b))
}

pub fn select_phi<T: Real>(data: &Dataset<T>, mode: TuneMode) -> Result<TuningResult<T>> {
    select_phi_with(data, mode, GridOptions::default())
}

pub fn select_phi_with<T: Real>(
    data: &Dataset<T>,
    mode: TuneMode,
    opts: GridOptions,
) -> Result<TuningResult<T>> {
    if !(opts.step > 0.0) {
        return Err(Error::Validation(format!("grid step {} must be > 0", opts.step)));
    }
    let lam = sample_strength_matrix(data)?.lambda_min_over_sqrt_p;
    if lam < WEAK_IV_THRESHOLD {
        debug!("lambda_min/sqrt(p) = {lam:.2} < {WEAK_IV_THRESHOLD}");
    }
    let sys = SrivwSystem::new(data, mode == TuneMode::Overlap)?;
    let mut q_values = Vec::new();
    for phi in grid_b(lam, opts.c, opts.step) {
        let phi: T = lit(phi);
        let Ok(beta) = sys.beta(phi) else { continue };
        match q_statistic(data, &beta, mode.q_mode()) {
            Ok(q) if q.is_finite() => q_values.push((phi, q)),
            _ => continue,
        }
    }
    if q_values.is_empty() {
        return Err(Error::TuningFailed);
    }
    let q_min = q_values.iter().map(|&(_, q)| q).fold(q_values[0].1, |a, b| a.min(b));
    let tol = lit::<T>(TIE_TOL) * q_min.max(T::one());
    let phi_star = q_values
        .iter()
        .find(|&&(_, q)| q <= q_min + tol)
        .map(|&(p, _)| p)
        .expect("minimum is attained");
    let selected_estimate = srivw_from_system(data, &sys, phi_star, mode.method())?;
    Ok(TuningResult {
        phi_star,
        q_values,
        grid_upper_exponent: opts.c - lam,
        lambda_min_over_sqrt_p: lam,
        selected_estimate,
    })
}

pub fn write_q_trace<T: Real>(result: &TuningResult<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "phi\tQ")?;
    for &(phi, q) in &result.q_values {
        writeln!(w, "{:.16e}\t{:.16e}", to_f64(phi), to_f64(q))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::srivw;
    use crate::summary_data::SnpSummary;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn single(gy: f64, g: f64, se_x: f64) -> Dataset<f64> {
        let s = SnpSummary::new(
            "a",
            DVector::from_element(1, g),
            DVector::from_element(1, se_x),
            gy,
            1.0,
            None,
        )
        .unwrap();
        Dataset::new(vec![s], DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = grid_b(17.0, 17.0, 0.5);
        assert_eq!(g.len(), 36);
        assert_eq!(g[0], 0.0);
        assert_relative_eq!(g[1], (-17f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(*g.last().unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(*grid_b(0.0, 17.0, 0.5).last().unwrap(), 2.415e7, max_relative = 1e-3);
        let two = grid_b(3.0, 17.0, 17.0);
        assert_eq!(two.len(), 3);
        assert_relative_eq!(two[1], (-3f64).exp());
        assert_relative_eq!(two[2], 14f64.exp(), max_relative = 1e-15);
    }

    #[test]
    fn q_examples() {
        // residual 3, σ_Y = 1, βᵀΣ_Xβ = 2 → 9/3
        let d = single(3.0, 0.0, 2f64.sqrt());
        assert_relative_eq!(q_statistic(&d, &DVector::from_element(1, 1.0), QMode::Plain).unwrap(), 3.0, epsilon = 1e-12);
        let perfect = single(2.0, 1.0, 0.1);
        assert_eq!(q_statistic(&perfect, &DVector::from_element(1, 2.0), QMode::Plain).unwrap(), 0.0);
        let zero = single(1.5, 1.0, 0.3);
        assert_relative_eq!(q_statistic(&zero, &DVector::from_element(1, 0.0), QMode::Plain).unwrap(), 2.25);
    }

    #[test]
    fn overlap_denominator_guard() {
        let d = single(1.0, 1.0, 0.1).with_cov_xy(Some(vec![DVector::from_element(1, 5.0)])).unwrap();
        match q_statistic(&d, &DVector::from_element(1, 1.0), QMode::Overlap) {
            Err(Error::DegenerateDenominator { snp }) => assert_eq!(snp, "a"),
            other => panic!("{other:?}"),
        }
    }

    fn strong_data() -> Dataset<f64> {
        let snps = (0..60)
            .map(|j| {
                let x = j as f64;
                let g = DVector::from_row_slice(&[1.0 + (x * 0.37).sin(), 0.5 + (x * 0.91).cos()]);
                SnpSummary::new(format!("s{j}"), g.clone(), DVector::from_element(2, 0.01), g[0] * 0.3 - g[1] * 0.2 + 0.01 * (x * 1.7).sin(), 0.01, None).unwrap()
            })
            .collect();
        Dataset::new(snps, DMatrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn strong_instruments_barely_regularized() {
        let d = strong_data();
        let t = select_phi(&d, TuneMode::Plain).unwrap();
        assert!(t.lambda_min_over_sqrt_p > 17.0);
        let s0 = srivw(&d, 0.0).unwrap();
        assert!((&t.selected_estimate.beta - &s0.beta).amax() < 1e-3);
        assert!(t.q_values.iter().any(|&(p, _)| p == t.phi_star));
        let qmin = t.q_values.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
        assert!(t.q_values.iter().all(|q| q.1 >= 0.0));
        assert!((t.q_values.iter().find(|q| q.0 == t.phi_star).unwrap().1 - qmin).abs() <= 1e-12 * qmin.max(1.0));
    }

    #[test]
    fn ties_pick_smallest_phi() {
        // Γ̂ = 0 gives β = 0 for every φ, hence identical Q everywhere
        let snps = (0..10)
            .map(|j| SnpSummary::new(format!("s{j}"), DVector::from_element(1, 0.1 + j as f64 * 0.01), DVector::from_element(1, 0.05), 0.0, 0.1, None).unwrap())
            .collect();
        let d = Dataset::new(snps, DMatrix::identity(1, 1)).unwrap();
        assert_eq!(select_phi(&d, TuneMode::Plain).unwrap().phi_star, 0.0);
    }

    #[test]
    fn replay_stable() {
        let d = strong_data();
        let a = select_phi(&d, TuneMode::Pleiotropy).unwrap();
        let b = select_phi(&d, TuneMode::Pleiotropy).unwrap();
        assert_eq!(a.q_values, b.q_values);
        assert!(a.selected_estimate.tau2.is_some());
    }

    proptest! {
        #[test]
        fn grid_shape(lam in -20.0f64..700.0, c in 0.5f64..30.0, step in 0.1f64..5.0) {
            let g = grid_b(lam, c, step);
            prop_assert_eq!(g.len(), 2 + (c / step + 1e-9).floor() as usize);
            prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*g.last().unwrap() <= (c - lam).exp() * (1.0 + 1e-12));
        }
    }
}
