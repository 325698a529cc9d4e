//! Small dense symmetric helpers on top of nalgebra's symmetric eigensolver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Largest tolerated ratio max|λ| / min|λ| before a solve is refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Eigen-decomposition with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEigen<T: Real> {
    pub values: DVector<T>,
    pub vectors: DMatrix<T>,
}

impl<T: Real> SymEigen<T> {
    pub fn new(a: &DMatrix<T>) -> Self {
        let sym = symmetrize(a);
        let eig = SymmetricEigen::new(sym);
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            eig.eigenvalues[i]
                .partial_cmp(&eig.eigenvalues[j])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SymEigen { values, vectors }
    }

    pub fn min(&self) -> T {
        self.values[0]
    }

    pub fn max(&self) -> T {
        self.values[self.values.len() - 1]
    }

    /// max|λ| / min|λ|; infinite for an exactly singular matrix.
    pub fn condition(&self) -> f64 {
        let abs: Vec<f64> = self.values.iter().map(|&v| to_f64(v).abs()).collect();
        let hi = abs.iter().cloned().fold(0.0, f64::max);
        let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// U diag(f(λ)) Uᵀ
    pub fn map(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.vectors.transpose()
    }
}

pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * lit::<T>(0.5)
}

pub fn max_abs<T: Real>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub fn is_symmetric<T: Real>(a: &DMatrix<T>, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = to_f64(max_abs(a)).max(1.0);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if to_f64((a[(i, j)] - a[(j, i)]).abs()) > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn min_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    SymEigen::new(a).min()
}

/// Inverse of a symmetric matrix, refusing anything with condition number above the limit.
pub fn inverse_guarded<T: Real>(a: &DMatrix<T>, hint: &'static str) -> Result<DMatrix<T>> {
    let eig = SymEigen::new(a);
    let condition = eig.condition();
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            condition,
            limit: CONDITION_LIMIT,
            hint,
        });
    }
    Ok(eig.map(|v| T::one() / v))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix. Eigenvalues below
/// `rel_cutoff * max|λ|` are treated as zero. Returns the inverse and the numerical rank.
pub fn pinv_symmetric<T: Real>(a: &DMatrix<T>, rel_cutoff: f64) -> (DMatrix<T>, usize) {
    let eig = SymEigen::new(a);
    let top = eig.values.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let cut = top * lit::<T>(rel_cutoff);
    let rank = eig.values.iter().filter(|v| v.abs() > cut).count();
    let inv = eig.map(|v| if v.abs() > cut { T::one() / v } else { T::zero() });
    (inv, rank)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    match a.clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => Err(Error::NotPsd(to_f64(min_eigenvalue(a)))),
    }
}
