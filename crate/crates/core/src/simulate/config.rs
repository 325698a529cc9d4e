//! Simulation configuration and its TOML form.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::individual::IndividualParams;
use super::summary::{default_correlation, default_overlap_correlation, CausalPreset, StrengthPreset, TrueModel};
use super::template;
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::tuning::{GridOptions, DEFAULT_C, DEFAULT_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Summary,
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhiSpec {
    Fixed(f64),
    Keyword(String),
}

impl Default for PhiSpec {
    fn default() -> Self {
        PhiSpec::Keyword("tune".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiRule {
    Tune,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_c() -> f64 {
    DEFAULT_C
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarySpec {
    /// "builtin" or a path to a template TSV (relative paths resolve against the config file).
    #[serde(default = "builtin")]
    pub template: String,
    pub causal: CausalPreset,
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    pub strength: StrengthPreset,
    pub divisor: f64,
    /// Absolute pleiotropy SD; takes precedence over `tau0_factor`.
    #[serde(default)]
    pub tau0: Option<f64>,
    /// τ₀ = factor × mean(σ_Yj).
    #[serde(default)]
    pub tau0_factor: Option<f64>,
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub overlap: bool,
    #[serde(default)]
    pub overlap_correlation: Option<Vec<Vec<f64>>>,
}

fn builtin() -> String {
    "builtin".into()
}

fn default_estimators() -> Vec<Method> {
    vec![Method::MvIvw, Method::Srivw]
}

/// On-disk configuration. Also serves as the resolved snapshot stored in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Mode,
    #[serde(default)]
    pub reps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    #[serde(default)]
    pub phi: PhiSpec,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub summary: Option<SummarySpec>,
    #[serde(default)]
    pub individual: Option<IndividualParams>,
}

#[derive(Debug, Clone)]
pub struct SummaryDesign {
    pub truth: TrueModel,
    pub causal_preset: CausalPreset,
    pub strength_preset: StrengthPreset,
    pub divisor: f64,
}

#[derive(Debug, Clone)]
pub enum Design {
    Summary(SummaryDesign),
    Individual(IndividualParams),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub design: Design,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Method>,
    pub phi: PhiRule,
    pub grid: GridOptions,
    pub source: ConfigFile,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be a square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |a, b| rows[a][b]))
}

impl SimConfig {
    pub fn mode(&self) -> Mode {
        match self.design {
            Design::Summary(_) => Mode::Summary,
            Design::Individual(_) => Mode::Individual,
        }
    }

    pub fn beta0(&self) -> DVector<f64> {
        match &self.design {
            Design::Summary(s) => s.truth.beta0.clone(),
            Design::Individual(p) => DVector::from_vec(p.beta0.clone()),
        }
    }

    /// Parse a TOML file. `seed` and `reps`, when given, override the file.
    pub fn from_file(path: &Path, seed: Option<u64>, reps: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base, seed, reps)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path, seed: Option<u64>, reps: Option<usize>) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_config(file, base_dir, seed, reps)
    }

    pub fn from_config(mut file: ConfigFile, base_dir: &Path, seed: Option<u64>, reps: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            file.seed = Some(s);
        }
        if let Some(r) = reps {
            file.reps = Some(r);
        }
        let seed = file.seed.ok_or_else(|| Error::Config("a seed is required".into()))?;
        let reps = file.reps.ok_or_else(|| Error::Config("reps is required".into()))?;
        if reps < 1 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if file.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        let phi = match &file.phi {
            PhiSpec::Fixed(v) if *v >= 0.0 => PhiRule::Fixed(*v),
            PhiSpec::Keyword(k) if k == "tune" => PhiRule::Tune,
            other => return Err(Error::Config(format!("phi must be \"tune\" or a number >= 0, got {other:?}"))),
        };
        let grid = file
            .grid
            .as_ref()
            .map(|g| GridOptions { c: g.c, step: g.step })
            .unwrap_or_default();
        if !(grid.step > 0.0) {
            return Err(Error::Config("grid step must be > 0".into()));
        }
        let design = match file.mode {
            Mode::Summary => {
                let s = file
                    .summary
                    .as_ref()
                    .ok_or_else(|| Error::Config("mode = \"summary\" needs a [summary] table".into()))?;
                Design::Summary(summary_design(s, base_dir)?)
            }
            Mode::Individual => {
                let p = file
                    .individual
                    .clone()
                    .ok_or_else(|| Error::Config("mode = \"individual\" needs an [individual] table".into()))?;
                p.validate()?;
                Design::Individual(p)
            }
        };
        let overlap = matches!(&design, Design::Summary(s) if s.truth.overlap.is_some());
        if file.estimators.contains(&Method::SrivwOverlap) && !overlap {
            return Err(Error::Config("srivw_overlap needs an overlap summary design".into()));
        }
        Ok(SimConfig {
            design,
            reps,
            seed,
            estimators: file.estimators.clone(),
            phi,
            grid,
            source: file,
        })
    }
}

fn summary_design(s: &SummarySpec, base_dir: &Path) -> Result<SummaryDesign> {
    let t = if s.template == "builtin" {
        template::builtin()
    } else {
        let p = PathBuf::from(&s.template);
        template::load(&if p.is_absolute() { p } else { base_dir.join(p) })?
    };
    let beta0 = match (s.causal.beta0(), &s.beta0) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("beta0 may only be given with causal = \"custom\"".into()))
        }
        (Some(b), None) => b,
        (None, Some(b)) => b.clone(),
        (None, None) => return Err(Error::Config("causal = \"custom\" needs beta0".into())),
    };
    if beta0.len() != t.k() {
        return Err(Error::Config(format!("beta0 has {} entries, template has K = {}", beta0.len(), t.k())));
    }
    let correlation = match &s.correlation {
        Some(rows) => matrix(rows, "correlation")?,
        None if t.k() == 3 => default_correlation(),
        None => DMatrix::identity(t.k(), t.k()),
    };
    let overlap = match (&s.overlap_correlation, s.overlap) {
        (Some(rows), _) => Some(matrix(rows, "overlap_correlation")?),
        (None, true) if t.k() == 3 => Some(default_overlap_correlation()),
        (None, true) => return Err(Error::Config("overlap with K != 3 needs overlap_correlation".into())),
        (None, false) => None,
    };
    let tau0 = match (s.tau0, s.tau0_factor) {
        (Some(t0), _) => t0,
        (None, Some(f)) => f * t.se_y.mean(),
        (None, None) => 0.0,
    };
    let truth = TrueModel::from_template(&t, DVector::from_vec(beta0), s.strength, s.divisor, correlation, tau0, overlap)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(SummaryDesign {
        truth,
        causal_preset: s.causal,
        strength_preset: s.strength,
        divisor: s.divisor,
    })
}
