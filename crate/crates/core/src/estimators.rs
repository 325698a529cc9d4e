//! MV-IVW, the spectral regularization operator and the SRIVW family.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymEigen, CONDITION_LIMIT};
use crate::scalar::{lit, to_f64, Real};
use crate::summary_data::Dataset;

/// Eigenvalues closer to zero than this make R_φ undefined.
pub const ZERO_EIGEN: f64 = 1e-12;
/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MvIvw,
    Srivw,
    SrivwPleiotropy,
    SrivwOverlap,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MvIvw => "mv_ivw",
            Method::Srivw => "srivw",
            Method::SrivwPleiotropy => "srivw_pleiotropy",
            Method::SrivwOverlap => "srivw_overlap",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mv_ivw" | "ivw" => Ok(Method::MvIvw),
            "srivw" => Ok(Method::Srivw),
            "srivw_pleiotropy" => Ok(Method::SrivwPleiotropy),
            "srivw_overlap" => Ok(Method::SrivwOverlap),
            other => Err(Error::Validation(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate<T: Real> {
    pub beta: DVector<T>,
    pub covariance: DMatrix<T>,
    pub se: DVector<T>,
    pub phi: T,
    /// τ̂² clipped at zero, only for `SrivwPleiotropy`.
    pub tau2: Option<T>,
    pub tau2_raw: Option<T>,
    pub method: Method,
    pub p_used: usize,
}

impl<T: Real> Estimate<T> {
    fn new(beta: DVector<T>, covariance: DMatrix<T>, phi: T, method: Method, p_used: usize) -> Self {
        let covariance = symmetrize(&covariance);
        let se = covariance.diagonal().map(|v| v.max(T::zero()).sqrt());
        Estimate {
            beta,
            covariance,
            se,
            phi,
            tau2: None,
            tau2_raw: None,
            method,
            p_used,
        }
    }

    /// β̂_k ± 1.959964·se_k
    pub fn ci95(&self) -> Vec<(T, T)> {
        let z = lit::<T>(Z_975);
        self.beta
            .iter()
            .zip(self.se.iter())
            .map(|(&b, &s)| (b - z * s, b + z * s))
            .collect()
    }
}

/// R_φ(A) = A + φA⁻¹.
pub fn spectral_regularize<T: Real>(a: &DMatrix<T>, phi: T) -> Result<DMatrix<T>> {
    if phi < T::zero() {
        return Err(Error::Validation(format!("phi = {phi} must be >= 0")));
    }
    if phi == T::zero() {
        return Ok(a.clone());
    }
    let eig = SymEigen::new(a);
    check_spectrum(&eig, phi)?;
    Ok(eig.map(|l| l + phi / l))
}

fn check_spectrum<T: Real>(eig: &SymEigen<T>, phi: T) -> Result<()> {
    if phi > T::zero() {
        if let Some(&l) = eig.values.iter().find(|l| l.abs() < lit(ZERO_EIGEN)) {
            return Err(Error::DegenerateSpectrum {
                eigenvalue: to_f64(l),
                phi: to_f64(phi),
            });
        }
    }
    Ok(())
}

/// Factorized pieces shared by every φ: the eigen-decomposition of Σ M̂_j − V_j
/// and the (possibly overlap-corrected) numerator.
#[derive(Debug, Clone)]
pub(crate) struct SrivwSystem<T: Real> {
    eig: SymEigen<T>,
    numerator: DVector<T>,
}

impl<T: Real> SrivwSystem<T> {
    pub(crate) fn new(data: &Dataset<T>, overlap: bool) -> Result<Self> {
        if overlap && !data.has_overlap() {
            return Err(Error::Validation(
                "overlap correction needs cov_xy for every SNP".into(),
            ));
        }
        check_p(data)?;
        let k = data.k();
        let mut a = DMatrix::<T>::zeros(k, k);
        for (j, s) in data.snps().iter().enumerate() {
            let w = T::one() / (s.se_y * s.se_y);
            a.ger(w, &s.gamma_hat, &s.gamma_hat, T::one());
            a -= data.sigma_x(j) * w;
        }
        Ok(SrivwSystem {
            eig: SymEigen::new(&a),
            numerator: numerator(data, overlap),
        })
    }

    fn regularized_eigenvalues(&self, phi: T) -> Result<DVector<T>> {
        check_spectrum(&self.eig, phi)?;
        let r = self.eig.values.map(|l| if phi > T::zero() { l + phi / l } else { l });
        let abs: Vec<f64> = r.iter().map(|&v| to_f64(v).abs()).collect();
        let hi = abs.iter().cloned().fold(0.0, f64::max);
        let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if lo == 0.0 { f64::INFINITY } else { hi / lo };
        if !(condition <= CONDITION_LIMIT) {
            return Err(Error::IllConditioned {
                condition,
                limit: CONDITION_LIMIT,
                hint: "try a larger phi or --tune",
            });
        }
        Ok(r)
    }

    /// R_φ(·)⁻¹ and β̂(φ).
    pub(crate) fn solve(&self, phi: T) -> Result<(DMatrix<T>, DVector<T>)> {
        let r = self.regularized_eigenvalues(phi)?;
        let u = &self.eig.vectors;
        let mut scaled = u.clone();
        for c in 0..r.len() {
            let s = T::one() / r[c];
            scaled.column_mut(c).scale_mut(s);
        }
        let rinv = scaled * u.transpose();
        let beta = &rinv * &self.numerator;
        Ok((rinv, beta))
    }

    pub(crate) fn beta(&self, phi: T) -> Result<DVector<T>> {
        Ok(self.solve(phi)?.1)
    }
}

fn check_p<T: Real>(data: &Dataset<T>) -> Result<()> {
    let (p, k) = (data.p(), data.k());
    if p < k {
        return Err(Error::InsufficientData(format!("p = {p} < K = {k}")));
    }
    if p == k {
        warn!("p = K = {k}: exactly identified, no heterogeneity information");
    }
    Ok(())
}

/// Σ_j (γ̂_jΓ̂_j − Σ_XYj) σ_Yj⁻², without the Σ_XYj term when `overlap` is false.
fn numerator<T: Real>(data: &Dataset<T>, overlap: bool) -> DVector<T> {
    let mut b = DVector::<T>::zeros(data.k());
    for s in data.snps() {
        let w = T::one() / (s.se_y * s.se_y);
        let mut term = &s.gamma_hat * s.gamma_y_hat;
        if overlap {
            if let Some(c) = &s.cov_xy {
                term -= c;
            }
        }
        b += term * w;
    }
    b
}

/// Variance bracket Σ_j {c_j M̂_j + V_jββᵀV_j [+ overlap terms]} with
/// c_j = 1 + βᵀV_jβ [+ τ²σ_Yj⁻²] [− 2βᵀW_j].
fn bracket<T: Real>(data: &Dataset<T>, beta: &DVector<T>, tau2: Option<T>, overlap: bool) -> DMatrix<T> {
    let k = data.k();
    let mut acc = DMatrix::<T>::zeros(k, k);
    for (j, s) in data.snps().iter().enumerate() {
        let w = T::one() / (s.se_y * s.se_y);
        let v = data.sigma_x(j) * w;
        let vb = &v * beta;
        let mut coef = T::one() + beta.dot(&vb);
        if let Some(t2) = tau2 {
            coef += t2 * w;
        }
        let wj = if overlap {
            s.cov_xy.as_ref().map(|c| c * w)
        } else {
            None
        };
        if let Some(wj) = &wj {
            coef -= lit::<T>(2.0) * beta.dot(wj);
        }
        acc.ger(coef * w, &s.gamma_hat, &s.gamma_hat, T::one());
        acc.ger(T::one(), &vb, &vb, T::one());
        if let Some(wj) = &wj {
            acc.ger(-T::one(), &vb, wj, T::one());
            acc.ger(-T::one(), wj, &vb, T::one());
            let c2 = T::one() + lit::<T>(4.0) * beta.dot(wj);
            acc.ger(c2, wj, wj, T::one());
        }
    }
    acc
}

pub fn mv_ivw<T: Real>(data: &Dataset<T>) -> Result<Estimate<T>> {
    check_p(data)?;
    let k = data.k();
    let mut m = DMatrix::<T>::zeros(k, k);
    for s in data.snps() {
        let w = T::one() / (s.se_y * s.se_y);
        m.ger(w, &s.gamma_hat, &s.gamma_hat, T::one());
    }
    let eig = SymEigen::new(&m);
    let condition = eig.condition();
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            condition,
            limit: CONDITION_LIMIT,
            hint: "the IVW normal matrix is near singular, consider SRIVW",
        });
    }
    let minv = eig.map(|l| T::one() / l);
    let beta = &minv * numerator(data, false);
    let cov = &minv * bracket(data, &beta, None, false) * &minv;
    Ok(Estimate::new(beta, cov, T::zero(), Method::MvIvw, data.p()))
}

pub(crate) fn srivw_from_system<T: Real>(
    data: &Dataset<T>,
    sys: &SrivwSystem<T>,
    phi: T,
    method: Method,
) -> Result<Estimate<T>> {
    if phi < T::zero() {
        return Err(Error::Validation(format!("phi = {phi} must be >= 0")));
    }
    let (rinv, beta) = sys.solve(phi)?;
    let (tau2, raw) = if method == Method::SrivwPleiotropy {
        let raw = tau2_raw(data, &beta);
        debug!("raw tau2 at phi = {phi:e}: {raw:e}");
        (Some(raw.max(T::zero())), Some(raw))
    } else {
        (None, None)
    };
    let overlap = method == Method::SrivwOverlap;
    let cov = &rinv * bracket(data, &beta, tau2, overlap) * &rinv;
    let mut est = Estimate::new(beta, cov, phi, method, data.p());
    est.tau2 = tau2;
    est.tau2_raw = raw;
    Ok(est)
}

pub fn srivw<T: Real>(data: &Dataset<T>, phi: T) -> Result<Estimate<T>> {
    let sys = SrivwSystem::new(data, false)?;
    srivw_from_system(data, &sys, phi, Method::Srivw)
}

/// Unclipped moment estimator of the pleiotropy variance τ².
pub fn tau2_raw<T: Real>(data: &Dataset<T>, beta: &DVector<T>) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for (j, s) in data.snps().iter().enumerate() {
        let w = T::one() / (s.se_y * s.se_y);
        let r = s.gamma_y_hat - s.gamma_hat.dot(beta);
        let bsb = (data.sigma_x(j) * beta).dot(beta);
        num += (r * r - s.se_y * s.se_y - bsb) * w;
        den += w;
    }
    num / den
}

/// τ̂² clipped at zero. `phi` only labels the log line.
pub fn estimate_tau2<T: Real>(data: &Dataset<T>, beta: &DVector<T>, phi: T) -> Result<T> {
    if beta.len() != data.k() {
        return Err(Error::Validation(format!(
            "beta has length {}, expected {}",
            beta.len(),
            data.k()
        )));
    }
    let raw = tau2_raw(data, beta);
    debug!("raw tau2 at phi = {phi:e}: {raw:e}");
    Ok(raw.max(T::zero()))
}

pub fn srivw_pleiotropy<T: Real>(data: &Dataset<T>, phi: T) -> Result<Estimate<T>> {
    let sys = SrivwSystem::new(data, false)?;
    srivw_from_system(data, &sys, phi, Method::SrivwPleiotropy)
}

pub fn srivw_overlap<T: Real>(data: &Dataset<T>, phi: T) -> Result<Estimate<T>> {
    let sys = SrivwSystem::new(data, true)?;
    srivw_from_system(data, &sys, phi, Method::SrivwOverlap)
}

/// Fixed-φ dispatch. `MvIvw` ignores φ.
pub fn estimate<T: Real>(data: &Dataset<T>, method: Method, phi: T) -> Result<Estimate<T>> {
    match method {
        Method::MvIvw => mv_ivw(data),
        Method::Srivw => srivw(data, phi),
        Method::SrivwPleiotropy => srivw_pleiotropy(data, phi),
        Method::SrivwOverlap => srivw_overlap(data, phi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary_data::SnpSummary;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_exposure(g: &[f64], se_x: &[f64], gy: &[f64], se_y: &[f64]) -> Dataset<f64> {
        let snps = (0..g.len())
            .map(|j| {
                SnpSummary::new(
                    format!("s{j}"),
                    DVector::from_element(1, g[j]),
                    DVector::from_element(1, se_x[j]),
                    gy[j],
                    se_y[j],
                    None,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(snps, DMatrix::identity(1, 1)).unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, p: usize, k: usize) -> Dataset<f64> {
        let corr = if k == 3 {
            DMatrix::from_row_slice(3, 3, &[1.0, -0.1, -0.05, -0.1, 1.0, 0.2, -0.05, 0.2, 1.0])
        } else {
            DMatrix::identity(k, k)
        };
        let snps = (0..p)
            .map(|j| {
                let g = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
                let se = DVector::from_fn(k, |_, _| 0.02 + 0.05 * rng.random::<f64>());
                SnpSummary::new(
                    format!("s{j}"),
                    g,
                    se,
                    rng.random::<f64>() - 0.5,
                    0.02 + 0.05 * rng.random::<f64>(),
                    None,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(snps, corr).unwrap()
    }

    #[test]
    fn ivw_hand_example() {
        let d = one_exposure(&[1.0, 1.0], &[0.1, 0.1], &[2.0, 4.0], &[1.0, 1.0]);
        assert_relative_eq!(mv_ivw(&d).unwrap().beta[0], 3.0, epsilon = 1e-12);
        let z = one_exposure(&[1.0, 2.0], &[0.1, 0.1], &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(mv_ivw(&z).unwrap().beta[0], 0.0);
    }

    #[test]
    fn srivw_hand_example() {
        // (2·4 + 2·4) / ((4 − 1) + (4 − 1))
        let d = one_exposure(&[2.0, 2.0], &[1.0, 1.0], &[4.0, 4.0], &[1.0, 1.0]);
        assert_relative_eq!(srivw(&d, 0.0).unwrap().beta[0], 16.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn negligible_measurement_error_matches_ivw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dataset(&mut rng, 20, 2);
        let snps: Vec<_> = d
            .snps()
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.se_x.fill(1e-100);
                s
            })
            .collect();
        let d = Dataset::new(snps, DMatrix::identity(2, 2)).unwrap();
        let a = mv_ivw(&d).unwrap();
        let b = srivw(&d, 0.0).unwrap();
        assert_relative_eq!(a.beta, b.beta, max_relative = 1e-12);
        assert_relative_eq!(a.covariance, b.covariance, max_relative = 1e-12);
    }

    #[test]
    fn regularizer_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0]));
        assert_relative_eq!(spectral_regularize(&d, 4.0).unwrap(), DMatrix::identity(2, 2) * 5.0, epsilon = 1e-12);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_relative_eq!(spectral_regularize(&a, 3.0).unwrap(), DMatrix::identity(2, 2) * 4.0, epsilon = 1e-12);
        assert_eq!(spectral_regularize(&a, 0.0).unwrap(), a);
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(spectral_regularize(&sing, 1.0), Err(Error::DegenerateSpectrum { .. })));
    }

    #[test]
    fn tau2_single_snp() {
        // residual 2, σ_Y = 1, negligible Σ_X
        let d = one_exposure(&[1.0], &[1e-100], &[2.0], &[1.0]);
        let t = estimate_tau2(&d, &DVector::from_element(1, 0.0), 0.0).unwrap();
        assert_relative_eq!(t, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn pleiotropy_at_zero_tau_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 40, 3);
        let plain = srivw(&d, 0.0).unwrap();
        let sys = SrivwSystem::new(&d, false).unwrap();
        let (rinv, beta) = sys.solve(0.0).unwrap();
        let cov0 = &rinv * bracket(&d, &beta, Some(0.0), false) * &rinv;
        assert_relative_eq!(symmetrize(&cov0), plain.covariance, max_relative = 1e-14);
    }

    #[test]
    fn se_grows_with_tau2() {
        let g: Vec<f64> = (1..=30).map(|j| 0.1 + 0.01 * j as f64).collect();
        let se = vec![0.01; 30];
        let base: Vec<f64> = g.iter().map(|x| 0.5 * x).collect();
        let mut last = 0.0;
        for scale in [0.0, 0.05, 0.2, 1.0] {
            let gy: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(j, y)| y + scale * if j % 2 == 0 { 1.0 } else { -1.0 })
                .collect();
            let d = one_exposure(&g, &se, &gy, &se);
            let e = srivw_pleiotropy(&d, 0.0).unwrap();
            assert!(e.se[0] >= last);
            last = e.se[0];
        }
    }

    #[test]
    fn overlap_with_zero_cov_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dataset(&mut rng, 30, 3);
        let zero = d.with_cov_xy(Some(vec![DVector::zeros(3); 30])).unwrap();
        for phi in [0.0, 0.3] {
            let a = srivw(&d, phi).unwrap();
            let b = srivw_overlap(&zero, phi).unwrap();
            assert_eq!(a.beta, b.beta);
            assert_eq!(a.covariance, b.covariance);
        }
        assert!(srivw_overlap(&d, 0.0).is_err());
    }

    #[test]
    fn ci_uses_normal_quantile() {
        let d = one_exposure(&[1.0, 2.0, 1.5], &[0.1; 3], &[1.0, 2.1, 1.4], &[0.1; 3]);
        let e = mv_ivw(&d).unwrap();
        let (lo, hi) = e.ci95()[0];
        assert_relative_eq!(hi - lo, 2.0 * Z_975 * e.se[0], epsilon = 1e-14);
    }

    #[test]
    fn f32_kernel_agrees_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dataset(&mut rng, 50, 3);
        let a = srivw(&d, 0.1).unwrap();
        let b = srivw(&d.cast::<f32>(), 0.1).unwrap();
        for k in 0..3 {
            assert!((a.beta[k] - b.beta[k] as f64).abs() < 1e-3 * a.beta[k].abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn regularized_spectrum_bounded(seed in 0u64..5000, phi in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let a = symmetrize(&b);
            let r = spectral_regularize(&a, phi).unwrap();
            for l in SymEigen::new(&r).values.iter() {
                prop_assert!(l.abs() >= 2.0 * phi.sqrt() * (1.0 - 1e-9));
            }
        }

        #[test]
        fn unit_equivariance(seed in 0u64..1000, c in 0.05f64..20.0, k in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dataset(&mut rng, 30, 3);
            let snps: Vec<_> = d.snps().iter().map(|s| {
                let mut s = s.clone();
                s.gamma_hat[k] *= c;
                s.se_x[k] *= c;
                s
            }).collect();
            let scaled = Dataset::new(snps, d.correlation().clone()).unwrap();
            let a = srivw(&d, 0.0).unwrap();
            let b = srivw(&scaled, 0.0).unwrap();
            for i in 0..3 {
                let want = if i == k { a.beta[i] / c } else { a.beta[i] };
                prop_assert!((b.beta[i] - want).abs() <= 1e-9 * want.abs().max(1e-3));
            }
        }

        #[test]
        fn covariance_psd_and_permutation_invariant(seed in 0u64..1000, phi in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dataset(&mut rng, 25, 3);
            let mut snps = d.snps().to_vec();
            snps.reverse();
            let rev = Dataset::new(snps, d.correlation().clone()).unwrap();
            for m in [Method::MvIvw, Method::Srivw, Method::SrivwPleiotropy] {
                let Ok(a) = estimate(&d, m, phi) else { continue };
                let b = estimate(&rev, m, phi).unwrap();
                prop_assert!((&a.beta - &b.beta).norm() <= 1e-9 * a.beta.norm().max(1.0));
                let tr = a.covariance.trace();
                prop_assert!(SymEigen::new(&a.covariance).min() >= -1e-10 * tr);
                for i in 0..3 {
                    prop_assert!((a.se[i] * a.se[i] - a.covariance[(i, i)].max(0.0)).abs() <= 1e-14 * a.covariance[(i, i)].abs());
                }
                prop_assert_eq!(a.tau2.is_some(), m == Method::SrivwPleiotropy);
            }
        }
    }
}
