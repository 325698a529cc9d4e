//! Deterministic 145×3 SNP-exposure template for the summary-data designs.
//!
//! Rule, for j = 1..145 with frac(x) = x − ⌊x⌋:
//!   f_j    = 0.05 + 0.45·frac(0.5 + j·0.6180339887498949)        (minor allele frequency)
//!   v_j    = 2 f_j (1 − f_j)
//!   u_jk   = Φ⁻¹(frac(0.5 + j·α_k)),  α = (√2−1, √3−1, √5−2)
//!   t_j    = A u_j,  A = [[−23.1, 0, 0], [−200, 77.5, 0], [61.7, −21.1, 6.6]]
//!   σ_Yj   = (4·10⁵ v_j)^{-1/2},  σ_Xjk = (n_k v_j)^{-1/2},  n = (4.0·10⁴, 2.9·10⁵, 4.0·10⁴)
//!   γ_jk   = t_jk σ_Xjk
//! The constants were calibrated so that, with the first exposure divided by D = 2.5, 5.5, 9.25,
//! the population λmin/√p is 107.0, 22.6, 7.98 and the MV-IVW probability limit for
//! β₀ = (0.8, 0.4, 0) is (0.72, 0.40, −0.015), (0.53, 0.39, −0.023), (0.33, 0.39, −0.024).
//! The first two exposures are strongly collinear (genetic correlation ≈ 0.93), as lipoprotein
//! traits are; that collinearity is what carries the weak-exposure bias onto β₃.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const TEMPLATE_P: usize = 145;
pub const TEMPLATE_K: usize = 3;
const GOLDEN: f64 = 0.6180339887498949;
const ALPHAS: [f64; 3] = [0.41421356237309515, 0.7320508075688772, 0.2360679774997898];
const LOADINGS: [[f64; 3]; 3] = [[-23.1, 0.0, 0.0], [-200.0, 77.5, 0.0], [61.7, -21.1, 6.6]];
const N_OUTCOME: f64 = 4.0e5;
const N_EXPOSURE: [f64; 3] = [4.0e4, 2.9e5, 4.0e4];

static EMBEDDED: &str = include_str!("../../data/template_145x3.tsv");

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub ids: Vec<String>,
    pub maf: DVector<f64>,
    /// p×K true SNP-exposure effects.
    pub gamma: DMatrix<f64>,
    pub se_x: DMatrix<f64>,
    pub se_y: DVector<f64>,
}

impl Template {
    pub fn p(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Evaluate the generating rule.
pub fn generate() -> Template {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let p = TEMPLATE_P;
    let mut maf = DVector::zeros(p);
    let mut gamma = DMatrix::zeros(p, TEMPLATE_K);
    let mut se_x = DMatrix::zeros(p, TEMPLATE_K);
    let mut se_y = DVector::zeros(p);
    for row in 0..p {
        let j = (row + 1) as f64;
        let f = 0.05 + 0.45 * frac(0.5 + j * GOLDEN);
        let v = 2.0 * f * (1.0 - f);
        let u: Vec<f64> = ALPHAS.iter().map(|a| std.inverse_cdf(frac(0.5 + j * a))).collect();
        maf[row] = f;
        se_y[row] = 1.0 / (N_OUTCOME * v).sqrt();
        for k in 0..TEMPLATE_K {
            let t: f64 = (0..TEMPLATE_K).map(|m| LOADINGS[k][m] * u[m]).sum();
            let s = 1.0 / (N_EXPOSURE[k] * v).sqrt();
            se_x[(row, k)] = s;
            gamma[(row, k)] = t * s;
        }
    }
    Template {
        ids: (1..=p).map(|j| format!("t{j:03}")).collect(),
        maf,
        gamma,
        se_x,
        se_y,
    }
}

/// The shipped table.
pub fn builtin() -> Template {
    parse(EMBEDDED, Path::new("<builtin template>")).expect("embedded template parses")
}

/// A user-supplied template in the same layout: snp, maf, gamma1..K, se_x1..K, beta_y, se_y.
pub fn load(path: &Path) -> Result<Template> {
    parse(&std::fs::read_to_string(path)?, path)
}

fn parse(text: &str, path: &Path) -> Result<Template> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (hline, header) = rows.next().ok_or_else(|| perr(1, "empty template".into()))?;
    let names: Vec<&str> = header.split('\t').collect();
    let k = names.iter().filter(|n| n.starts_with("gamma")).count();
    let col = |name: String| {
        names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| perr(hline + 1, format!("missing column '{name}'")))
    };
    let g_cols: Vec<usize> = (1..=k).map(|i| col(format!("gamma{i}"))).collect::<Result<_>>()?;
    let s_cols: Vec<usize> = (1..=k).map(|i| col(format!("se_x{i}"))).collect::<Result<_>>()?;
    let (id_c, maf_c, sy_c) = (col("snp".into())?, col("maf".into())?, col("se_y".into())?);
    let mut ids = Vec::new();
    let (mut maf, mut g, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, line) in rows {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != names.len() {
            return Err(perr(i + 1, format!("expected {} fields, found {}", names.len(), f.len())));
        }
        let num = |c: usize| -> Result<f64> {
            f[c].trim()
                .parse()
                .map_err(|_| perr(i + 1, format!("cannot parse '{}'", f[c])))
        };
        ids.push(f[id_c].to_string());
        maf.push(num(maf_c)?);
        for &c in &g_cols {
            g.push(num(c)?);
        }
        for &c in &s_cols {
            let s = num(c)?;
            if !(s > 0.0) {
                return Err(perr(i + 1, "standard errors must be > 0".into()));
            }
            sx.push(s);
        }
        sy.push(num(sy_c)?);
    }
    let p = ids.len();
    if p < k || k == 0 {
        return Err(Error::InsufficientData(format!("template has {p} SNPs and {k} exposures")));
    }
    Ok(Template {
        ids,
        maf: DVector::from_vec(maf),
        gamma: DMatrix::from_row_slice(p, k, &g),
        se_x: DMatrix::from_row_slice(p, k, &sx),
        se_y: DVector::from_vec(sy),
    })
}
