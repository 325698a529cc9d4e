//! Per-SNP summary statistics, the shared exposure correlation, and TSV I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, SymEigen};
use crate::scalar::{lit, to_f64, Real};

const SYMMETRY_TOL: f64 = 1e-10;
const DIAG_TOL: f64 = 1e-10;
/// Eigenvalue floor used when repairing an estimated correlation matrix.
pub const PD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SnpSummary<T: Real> {
    pub id: String,
    /// SNP-exposure effects, length K.
    pub gamma_hat: DVector<T>,
    pub se_x: DVector<T>,
    /// SNP-outcome effect.
    pub gamma_y_hat: T,
    pub se_y: T,
    /// Cov(gamma_hat, gamma_y_hat) when exposure and outcome samples overlap.
    pub cov_xy: Option<DVector<T>>,
}

impl<T: Real> SnpSummary<T> {
    pub fn new(
        id: impl Into<String>,
        gamma_hat: DVector<T>,
        se_x: DVector<T>,
        gamma_y_hat: T,
        se_y: T,
        cov_xy: Option<DVector<T>>,
    ) -> Result<Self> {
        let snp = SnpSummary {
            id: id.into(),
            gamma_hat,
            se_x,
            gamma_y_hat,
            se_y,
            cov_xy,
        };
        snp.validate()?;
        Ok(snp)
    }

    pub fn k(&self) -> usize {
        self.gamma_hat.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.gamma_hat.len();
        if k == 0 {
            return Err(Error::Validation(format!("SNP {}: no exposures", self.id)));
        }
        if self.se_x.len() != k {
            return Err(Error::Validation(format!(
                "SNP {}: {} exposure effects but {} standard errors",
                self.id,
                k,
                self.se_x.len()
            )));
        }
        if let Some(c) = &self.cov_xy {
            if c.len() != k {
                return Err(Error::Validation(format!(
                    "SNP {}: cov_xy has length {}, expected {}",
                    self.id,
                    c.len(),
                    k
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("SNP {}: non-finite cov_xy", self.id)));
            }
        }
        if self.gamma_hat.iter().any(|v| !v.is_finite()) || !self.gamma_y_hat.is_finite() {
            return Err(Error::Validation(format!("SNP {}: non-finite effect estimate", self.id)));
        }
        for (i, &s) in self.se_x.iter().enumerate() {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(Error::Validation(format!(
                    "SNP {}: se_x{} = {} must be finite and > 0",
                    self.id,
                    i + 1,
                    s
                )));
            }
        }
        if !(self.se_y > T::zero()) || !self.se_y.is_finite() {
            return Err(Error::Validation(format!(
                "SNP {}: se_y = {} must be finite and > 0",
                self.id, self.se_y
            )));
        }
        Ok(())
    }

    /// Σ_Xj = diag(se_x) Σ diag(se_x).
    pub fn sigma_x(&self, correlation: &DMatrix<T>) -> DMatrix<T> {
        let k = self.k();
        DMatrix::from_fn(k, k, |a, b| self.se_x[a] * self.se_x[b] * correlation[(a.min(b), a.max(b))])
    }
}

/// A set of independent instruments sharing one exposure correlation matrix.
#[derive(Debug, Clone)]
pub struct Dataset<T: Real> {
    snps: Vec<SnpSummary<T>>,
    correlation: DMatrix<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(snps: Vec<SnpSummary<T>>, correlation: DMatrix<T>) -> Result<Self> {
        let Some(first) = snps.first() else {
            return Err(Error::InsufficientData("dataset has no SNPs".into()));
        };
        let k = first.k();
        for s in &snps {
            s.validate()?;
            if s.k() != k {
                return Err(Error::Validation(format!(
                    "SNP {} has {} exposures, expected {}",
                    s.id,
                    s.k(),
                    k
                )));
            }
        }
        let with_cov = snps.iter().filter(|s| s.cov_xy.is_some()).count();
        if with_cov != 0 && with_cov != snps.len() {
            return Err(Error::Validation(
                "cov_xy must be given for every SNP or for none".into(),
            ));
        }
        if snps.len() < k {
            return Err(Error::InsufficientData(format!(
                "{} SNPs cannot identify {} exposures",
                snps.len(),
                k
            )));
        }
        validate_correlation(&correlation, k)?;
        Ok(Dataset { snps, correlation })
    }

    pub fn snps(&self) -> &[SnpSummary<T>] {
        &self.snps
    }

    pub fn correlation(&self) -> &DMatrix<T> {
        &self.correlation
    }

    pub fn k(&self) -> usize {
        self.snps[0].k()
    }

    pub fn p(&self) -> usize {
        self.snps.len()
    }

    pub fn has_overlap(&self) -> bool {
        self.snps[0].cov_xy.is_some()
    }

    pub fn sigma_x(&self, j: usize) -> DMatrix<T> {
        self.snps[j].sigma_x(&self.correlation)
    }

    /// Keep only SNPs whose index is listed.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let snps = keep.iter().map(|&j| self.snps[j].clone()).collect();
        Dataset::new(snps, self.correlation.clone())
    }

    /// The same data with every cov_xy replaced.
    pub fn with_cov_xy(&self, cov: Option<Vec<DVector<T>>>) -> Result<Self> {
        let mut snps = self.snps.clone();
        match cov {
            None => snps.iter_mut().for_each(|s| s.cov_xy = None),
            Some(c) => {
                if c.len() != snps.len() {
                    return Err(Error::Validation("one cov_xy vector per SNP required".into()));
                }
                for (s, v) in snps.iter_mut().zip(c) {
                    s.cov_xy = Some(v);
                }
            }
        }
        Dataset::new(snps, self.correlation.clone())
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        let cv = |v: &DVector<T>| v.map(|x| lit::<U>(to_f64(x)));
        let snps = self
            .snps
            .iter()
            .map(|s| SnpSummary {
                id: s.id.clone(),
                gamma_hat: cv(&s.gamma_hat),
                se_x: cv(&s.se_x),
                gamma_y_hat: lit(to_f64(s.gamma_y_hat)),
                se_y: lit(to_f64(s.se_y)),
                cov_xy: s.cov_xy.as_ref().map(cv),
            })
            .collect();
        Dataset {
            snps,
            correlation: self.correlation.map(|x| lit::<U>(to_f64(x))),
        }
    }
}

fn validate_correlation<T: Real>(c: &DMatrix<T>, k: usize) -> Result<()> {
    if c.nrows() != k || c.ncols() != k {
        return Err(Error::Validation(format!(
            "correlation matrix is {}x{}, expected {}x{}",
            c.nrows(),
            c.ncols(),
            k,
            k
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("correlation matrix has non-finite entries".into()));
    }
    if !is_symmetric(c, SYMMETRY_TOL) {
        return Err(Error::Validation("correlation matrix is not symmetric".into()));
    }
    for i in 0..k {
        if to_f64((c[(i, i)] - T::one()).abs()) > DIAG_TOL {
            return Err(Error::Validation(format!(
                "correlation matrix diagonal entry {} is {}, expected 1",
                i + 1,
                c[(i, i)]
            )));
        }
    }
    let lmin = SymEigen::new(c).min();
    if !(lmin > T::zero()) {
        return Err(Error::NotPsd(to_f64(lmin)));
    }
    Ok(())
}

/// Σ_Xj = diag(se) Σ diag(se).
pub fn build_sigma_xj<T: Real>(se_x: &DVector<T>, correlation: &DMatrix<T>) -> Result<DMatrix<T>> {
    let k = se_x.len();
    if correlation.nrows() != k || correlation.ncols() != k {
        return Err(Error::Validation(format!(
            "correlation is {}x{} but {} standard errors given",
            correlation.nrows(),
            correlation.ncols(),
            k
        )));
    }
    Ok(DMatrix::from_fn(k, k, |a, b| se_x[a] * se_x[b] * correlation[(a.min(b), a.max(b))]))
}

/// Sample correlation of null-SNP Z-values (rows = SNPs, columns = exposures),
/// repaired to positive definite by eigenvalue clipping when needed.
pub fn estimate_shared_correlation<T: Real>(z: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (t, k) = z.shape();
    if t < 2 {
        return Err(Error::InsufficientData(format!(
            "{t} null SNPs, at least 2 needed to estimate the exposure correlation"
        )));
    }
    if t < 30 {
        warn!("only {t} null SNPs available for the exposure correlation estimate");
    }
    let n = lit::<T>(t as f64);
    let means: Vec<T> = (0..k).map(|c| z.column(c).sum() / n).collect();
    let centered = DMatrix::from_fn(t, k, |r, c| z[(r, c)] - means[c]);
    let cross = centered.transpose() * &centered;
    let mut sd = Vec::with_capacity(k);
    for c in 0..k {
        let v = cross[(c, c)];
        if !(v > T::zero()) {
            return Err(Error::Validation(format!(
                "null-SNP Z column {} is constant",
                c + 1
            )));
        }
        sd.push(v.sqrt());
    }
    let mut corr = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            T::one()
        } else {
            cross[(a, b)] / (sd[a] * sd[b])
        }
    });
    let eig = SymEigen::new(&corr);
    let floor = lit::<T>(PD_FLOOR);
    if eig.min() < floor {
        warn!(
            "estimated exposure correlation has eigenvalue {:.3e}, clipping at {PD_FLOOR:.0e}",
            eig.min()
        );
        let clipped = eig.map(|v| v.max(floor));
        let d: Vec<T> = (0..k).map(|i| clipped[(i, i)].sqrt()).collect();
        corr = DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                T::one()
            } else {
                clipped[(a, b)] / (d[a] * d[b])
            }
        });
    }
    Ok(corr)
}

// ---------------------------------------------------------------- I/O

struct Columns {
    id: usize,
    beta_x: Vec<usize>,
    se_x: Vec<usize>,
    beta_y: usize,
    se_y: usize,
    cov_xy: Option<Vec<usize>>,
    width: usize,
}

fn locate_columns(header: &str, k: usize, path: &Path) -> Result<Columns> {
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &str| -> Option<usize> { names.iter().position(|n| *n == name) };
    let need = |name: &str| -> Result<usize> {
        find(name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing column '{name}'"),
        })
    };
    let beta_x = (1..=k).map(|i| need(&format!("beta_x{i}"))).collect::<Result<_>>()?;
    let se_x = (1..=k).map(|i| need(&format!("se_x{i}"))).collect::<Result<_>>()?;
    if find(&format!("beta_x{}", k + 1)).is_some() {
        warn!("{} has more exposure columns than K = {k}; extra columns ignored", path.display());
    }
    let cov: Vec<Option<usize>> = (1..=k).map(|i| find(&format!("cov_xy{i}"))).collect();
    let cov_xy = if cov.iter().all(Option::is_none) {
        None
    } else if cov.iter().all(Option::is_some) {
        Some(cov.into_iter().flatten().collect())
    } else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "cov_xy columns must be present for every exposure or for none".into(),
        });
    };
    Ok(Columns {
        id: need("snp")?,
        beta_x,
        se_x,
        beta_y: need("beta_y")?,
        se_y: need("se_y")?,
        cov_xy,
        width: names.len(),
    })
}

/// Parse summary statistics from TSV text. `source` only labels error messages.
pub fn read_summaries<T: Real, R: BufRead>(
    reader: R,
    source: &Path,
    k: usize,
) -> Result<Vec<SnpSummary<T>>> {
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                break line;
            }
            None => {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        }
    };
    let cols = locate_columns(&header, k, source)?;
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row = out.len() + 1;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != cols.width {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: lineno,
                msg: format!("expected {} fields, found {}", cols.width, fields.len()),
            });
        }
        let num = |c: usize, name: &str| -> Result<T> {
            let v: f64 = fields[c].parse().map_err(|_| Error::Parse {
                path: source.to_path_buf(),
                line: lineno,
                msg: format!("{name}: cannot parse '{}' as a number", fields[c]),
            })?;
            Ok(lit(v))
        };
        let vec_of = |idx: &[usize], stem: &str| -> Result<DVector<T>> {
            let vals = idx
                .iter()
                .enumerate()
                .map(|(i, &c)| num(c, &format!("{stem}{}", i + 1)))
                .collect::<Result<Vec<T>>>()?;
            Ok(DVector::from_vec(vals))
        };
        let id = fields[cols.id].to_string();
        let snp = SnpSummary::new(
            id.clone(),
            vec_of(&cols.beta_x, "beta_x")?,
            vec_of(&cols.se_x, "se_x")?,
            num(cols.beta_y, "beta_y")?,
            num(cols.se_y, "se_y")?,
            cols.cov_xy.as_deref().map(|c| vec_of(c, "cov_xy")).transpose()?,
        )
        .map_err(|e| match e {
            Error::Validation(msg) => {
                Error::Validation(format!("row {row} (line {lineno}): {msg}"))
            }
            other => other,
        })?;
        out.push(snp);
    }
    Ok(out)
}

/// Whitespace separated K×K matrix.
pub fn read_correlation<T: Real>(path: &Path, k: usize) -> Result<DMatrix<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut vals = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("cannot parse '{f}' as a number"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != k {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {k} entries, found {}", row.len()),
            });
        }
        vals.extend(row);
        rows += 1;
    }
    if rows != k {
        return Err(Error::Validation(format!(
            "{}: expected {k} rows, found {rows}",
            path.display()
        )));
    }
    let m = DMatrix::from_row_slice(k, k, &vals).map(|v| lit::<T>(v));
    validate_correlation(&m, k)?;
    Ok(m)
}

/// Load a dataset. Without a correlation file the exposures are assumed uncorrelated.
pub fn load_dataset<T: Real>(path: &Path, k: usize, correlation: Option<&Path>) -> Result<Dataset<T>> {
    let file = File::open(path)?;
    let snps = read_summaries(BufReader::new(file), path, k)?;
    let corr = match correlation {
        Some(c) => read_correlation(c, k)?,
        None => {
            warn!("no correlation file given, assuming identity exposure correlation");
            DMatrix::identity(k, k)
        }
    };
    Dataset::new(snps, corr)
}

pub fn write_summaries<T: Real, W: Write>(data: &Dataset<T>, mut w: W) -> Result<()> {
    let k = data.k();
    let mut header = vec!["snp".to_string()];
    header.extend((1..=k).map(|i| format!("beta_x{i}")));
    header.extend((1..=k).map(|i| format!("se_x{i}")));
    header.push("beta_y".into());
    header.push("se_y".into());
    if data.has_overlap() {
        header.extend((1..=k).map(|i| format!("cov_xy{i}")));
    }
    writeln!(w, "{}", header.join("\t"))?;
    let f = |x: T| format!("{:.16e}", to_f64(x));
    for s in data.snps() {
        let mut row = vec![s.id.clone()];
        row.extend(s.gamma_hat.iter().map(|&x| f(x)));
        row.extend(s.se_x.iter().map(|&x| f(x)));
        row.push(f(s.gamma_y_hat));
        row.push(f(s.se_y));
        if let Some(c) = &s.cov_xy {
            row.extend(c.iter().map(|&x| f(x)));
        }
        writeln!(w, "{}", row.join("\t"))?;
    }
    Ok(())
}

pub fn write_dataset<T: Real>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_summaries(data, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_correlation<T: Real>(c: &DMatrix<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in 0..c.nrows() {
        let row: Vec<String> = (0..c.ncols()).map(|j| format!("{:.16e}", to_f64(c[(r, j)]))).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Companion correlation path convention used by the CLI: `<data>.corr`.
pub fn default_correlation_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".corr");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn snp(id: &str, g: &[f64], se: &[f64], gy: f64, sey: f64) -> SnpSummary<f64> {
        SnpSummary::new(
            id,
            DVector::from_row_slice(g),
            DVector::from_row_slice(se),
            gy,
            sey,
            None,
        )
        .unwrap()
    }

    #[test]
    fn sigma_xj_from_se_and_rho() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let s = build_sigma_xj(&DVector::from_row_slice(&[2.0, 3.0]), &c).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0]));
    }

    #[test]
    fn identical_columns_give_unit_correlation() {
        let z = DMatrix::from_row_slice(4, 2, &[0.1, 0.1, -1.0, -1.0, 2.0, 2.0, 0.4, 0.4]);
        let c = estimate_shared_correlation(&z).unwrap();
        assert_relative_eq!(c[(0, 1)], 1.0, epsilon = 1e-6);
        assert!(SymEigen::new(&c).min() > 0.0);
    }

    #[test]
    fn correlation_needs_two_rows_and_variation() {
        let one = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        assert!(matches!(
            estimate_shared_correlation(&one),
            Err(Error::InsufficientData(_))
        ));
        let flat = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, 0.3, 1.0, -0.2]);
        assert!(matches!(estimate_shared_correlation(&flat), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_zero_se_naming_row() {
        let text = "snp\tbeta_x1\tse_x1\tbeta_y\tse_y\n\
                    a\t0.1\t0.01\t0.2\t0.01\n\
                    b\t0.1\t0.01\t0.2\t0.01\n\
                    c\t0.1\t0\t0.2\t0.01\n";
        let err = read_summaries::<f64, _>(text.as_bytes(), Path::new("x.tsv"), 1).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("row 3"), "{msg}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "snp\tbeta_x1\tse_x1\tbeta_y\tse_y\na\t0.1\t0.01\t0.2\n";
        match read_summaries::<f64, _>(text.as_bytes(), Path::new("x.tsv"), 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_cov_columns_rejected() {
        let text = "snp\tbeta_x1\tbeta_x2\tse_x1\tse_x2\tbeta_y\tse_y\tcov_xy1\n";
        assert!(read_summaries::<f64, _>(text.as_bytes(), Path::new("x"), 2).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let c = DMatrix::identity(2, 2);
        let one = vec![snp("a", &[0.1, 0.2], &[0.01, 0.01], 0.1, 0.01)];
        assert!(matches!(Dataset::new(one, c.clone()), Err(Error::InsufficientData(_))));
        let bad_c = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        let two = vec![
            snp("a", &[0.1, 0.2], &[0.01, 0.01], 0.1, 0.01),
            snp("b", &[0.3, 0.2], &[0.01, 0.01], 0.1, 0.01),
        ];
        assert!(Dataset::new(two, bad_c).is_err());
    }

    proptest! {
        #[test]
        fn tsv_round_trip_is_lossless(
            rows in prop::collection::vec(
                (prop::array::uniform2(-1.0e3f64..1.0e3), prop::array::uniform2(1e-6f64..10.0),
                 -1.0e3f64..1.0e3, 1e-6f64..10.0),
                2..12)
        ) {
            let snps: Vec<_> = rows.iter().enumerate()
                .map(|(i, (g, s, gy, sy))| snp(&format!("rs{i}"), g, s, *gy, *sy))
                .collect();
            let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
            let data = Dataset::new(snps, c).unwrap();
            let mut buf = Vec::new();
            write_summaries(&data, &mut buf).unwrap();
            let back = read_summaries::<f64, _>(&buf[..], Path::new("mem"), 2).unwrap();
            prop_assert_eq!(back, data.snps().to_vec());
        }

        #[test]
        fn sigma_xj_is_symmetric_psd(se in prop::array::uniform3(1e-4f64..5.0), r in -0.45f64..0.45) {
            let c = DMatrix::from_row_slice(3, 3, &[1.0, r, r / 2.0, r, 1.0, r, r / 2.0, r, 1.0]);
            let s = build_sigma_xj(&DVector::from_row_slice(&se), &c).unwrap();
            prop_assert_eq!(&s, &s.transpose());
            prop_assert!(SymEigen::new(&s).min() > -1e-12);
        }
    }
}
