//! Replication driver and aggregation into a metrics table.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{Design, PhiRule, SimConfig};
use super::individual::{assemble_dataset, generate_individual, select_ivs, true_gammas};
use super::summary::SummarySampler;
use crate::error::{Error, Result};
use crate::estimators::{estimate, Method, Z_975};
use crate::strength::strength_report;
use crate::Dataset;
use crate::tuning::{select_phi_with, TuneMode};

/// Replication-independent state: Cholesky factors or the fixed individual-level effects.
#[derive(Debug, Clone)]
pub enum Prepared {
    Summary(Box<SummarySampler>),
    Individual(DMatrix<f64>),
}

impl Prepared {
    pub fn new(config: &SimConfig) -> Result<Self> {
        Ok(match &config.design {
            Design::Summary(s) => Prepared::Summary(Box::new(SummarySampler::new(s.truth.clone())?)),
            Design::Individual(p) => Prepared::Individual(true_gammas(p, config.seed)),
        })
    }

    /// The analysis dataset of replication `rep`, plus the number of SNPs selected.
    pub fn dataset(&self, config: &SimConfig, rep: u64) -> Result<Dataset> {
        match (self, &config.design) {
            (Prepared::Summary(s), _) => s.draw(config.seed, rep),
            (Prepared::Individual(g), Design::Individual(p)) => {
                let draw = generate_individual(p, g, config.seed, rep)?;
                let sel = select_ivs(&draw.selection, p.selection_threshold())?;
                assemble_dataset(&draw, &sel, p.null_pvalue)
            }
            _ => unreachable!("prepared state matches design"),
        }
    }
}

/// Summary-data draw for one replication.
pub fn generate_summary(config: &SimConfig, rep_index: u64) -> Result<Dataset> {
    match &config.design {
        Design::Summary(s) => SummarySampler::new(s.truth.clone())?.draw(config.seed, rep_index),
        Design::Individual(_) => Err(Error::Config("generate_summary needs a summary design".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepEstimate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub phi: f64,
    pub tau2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub rep: u64,
    /// NaN when data generation failed.
    pub lambda_min_over_sqrt_p: f64,
    pub conditional_f: Vec<f64>,
    pub p_used: usize,
    pub estimates: Vec<std::result::Result<RepEstimate, String>>,
}

pub fn fit(data: &Dataset, method: Method, phi: PhiRule, config: &SimConfig) -> Result<RepEstimate> {
    let e = match (method, phi) {
        (Method::MvIvw, _) => estimate(data, method, 0.0)?,
        (_, PhiRule::Fixed(v)) => estimate(data, method, v)?,
        (m, PhiRule::Tune) => {
            let mode = TuneMode::for_method(m).expect("SRIVW family");
            select_phi_with(data, mode, config.grid)?.selected_estimate
        }
    };
    Ok(RepEstimate {
        beta: e.beta.iter().cloned().collect(),
        se: e.se.iter().cloned().collect(),
        phi: e.phi,
        tau2: e.tau2,
    })
}

pub fn run_replication(config: &SimConfig, prepared: &Prepared, methods: &[Method], rep: u64) -> RepOutcome {
    let failed = |msg: String| RepOutcome {
        rep,
        lambda_min_over_sqrt_p: f64::NAN,
        conditional_f: Vec::new(),
        p_used: 0,
        estimates: methods.iter().map(|_| Err(msg.clone())).collect(),
    };
    let data = match prepared.dataset(config, rep) {
        Ok(d) => d,
        Err(e) => return failed(format!("data generation: {e}")),
    };
    let (lam, cf) = match strength_report(&data) {
        Ok(r) => (r.lambda_min_over_sqrt_p, r.conditional_f),
        Err(e) => return failed(format!("strength: {e}")),
    };
    RepOutcome {
        rep,
        lambda_min_over_sqrt_p: lam,
        conditional_f: cf,
        p_used: data.p(),
        estimates: methods
            .iter()
            .map(|&m| fit(&data, m, config.phi, config).map_err(|e| e.to_string()))
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub method: Method,
    /// 1-based exposure index.
    pub exposure: usize,
    pub beta0: f64,
    pub mean_est: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub failures: usize,
    pub mean_phi: f64,
    pub mean_tau2: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsTable {
    pub reps: usize,
    pub seed: u64,
    pub beta0: Vec<f64>,
    pub rows: Vec<MetricsRow>,
    pub methods: Vec<MethodSummary>,
    pub mean_lambda_min_over_sqrt_p: f64,
    pub true_lambda_min_over_sqrt_p: Option<f64>,
    pub mean_conditional_f: Vec<f64>,
    pub mean_snps_used: f64,
    pub sd_snps_used: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (m, (ss / (n - 1.0)).sqrt())
}

/// Deterministic reduction of per-replication outcomes (in the order given).
pub fn aggregate(
    config: &SimConfig,
    methods: &[Method],
    outcomes: &[RepOutcome],
    true_lambda: Option<f64>,
) -> Result<MetricsTable> {
    let reps = outcomes.len();
    let beta0 = config.beta0();
    let k = beta0.len();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (mi, &m) in methods.iter().enumerate() {
        let ok: Vec<&RepEstimate> = outcomes.iter().filter_map(|o| o.estimates[mi].as_ref().ok()).collect();
        let failures = reps - ok.len();
        if failures > 0 {
            let first = outcomes
                .iter()
                .find_map(|o| o.estimates[mi].as_ref().err())
                .cloned()
                .unwrap_or_default();
            if failures * 100 >= reps {
                return Err(Error::TooManyFailures {
                    method: m.to_string(),
                    failures,
                    reps,
                    first,
                });
            }
            warn!("{m}: {failures} of {reps} replications failed and are excluded ({first})");
        }
        for e in 0..k {
            let est: Vec<f64> = ok.iter().map(|r| r.beta[e]).collect();
            let se: Vec<f64> = ok.iter().map(|r| r.se[e]).collect();
            let (mean_est, sd) = mean_sd(&est);
            let covered = ok
                .iter()
                .filter(|r| (r.beta[e] - beta0[e]).abs() <= Z_975 * r.se[e])
                .count();
            rows.push(MetricsRow {
                method: m,
                exposure: e + 1,
                beta0: beta0[e],
                mean_est,
                sd,
                mean_se: mean_sd(&se).0,
                coverage: covered as f64 / ok.len().max(1) as f64,
                n_ok: ok.len(),
            });
        }
        let phis: Vec<f64> = ok.iter().map(|r| r.phi).collect();
        let tau: Vec<f64> = ok.iter().filter_map(|r| r.tau2).collect();
        summaries.push(MethodSummary {
            method: m,
            failures,
            mean_phi: mean_sd(&phis).0,
            mean_tau2: (!tau.is_empty()).then(|| mean_sd(&tau).0),
        });
    }
    let good: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.lambda_min_over_sqrt_p.is_finite()).collect();
    let lam: Vec<f64> = good.iter().map(|o| o.lambda_min_over_sqrt_p).collect();
    let used: Vec<f64> = good.iter().map(|o| o.p_used as f64).collect();
    let cf = (0..k)
        .map(|e| mean_sd(&good.iter().map(|o| o.conditional_f[e]).collect::<Vec<_>>()).0)
        .collect();
    let (mean_used, sd_used) = mean_sd(&used);
    Ok(MetricsTable {
        reps,
        seed: config.seed,
        beta0: beta0.iter().cloned().collect(),
        rows,
        methods: summaries,
        mean_lambda_min_over_sqrt_p: mean_sd(&lam).0,
        true_lambda_min_over_sqrt_p: true_lambda,
        mean_conditional_f: cf,
        mean_snps_used: mean_used,
        sd_snps_used: sd_used,
    })
}

/// Run `config.reps` replications in parallel and aggregate in replication order.
pub fn monte_carlo(config: &SimConfig, methods: &[Method]) -> Result<MetricsTable> {
    if config.reps < 2 {
        return Err(Error::Config("a Monte Carlo run needs reps >= 2".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    let prepared = Prepared::new(config)?;
    let true_lambda = match &config.design {
        Design::Summary(s) => Some(s.truth.lambda_min_over_sqrt_p()?),
        Design::Individual(_) => None,
    };
    let outcomes: Vec<RepOutcome> = (0..config.reps as u64)
        .into_par_iter()
        .map(|r| run_replication(config, &prepared, methods, r))
        .collect();
    aggregate(config, methods, &outcomes, true_lambda)
}

impl MetricsTable {
    pub fn row(&self, method: Method, exposure: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.exposure == exposure)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        writeln!(w, "# reps\t{}", self.reps)?;
        writeln!(w, "# seed\t{}", self.seed)?;
        writeln!(w, "# mean_lambda_min_over_sqrt_p\t{:.6}", self.mean_lambda_min_over_sqrt_p)?;
        if let Some(t) = self.true_lambda_min_over_sqrt_p {
            writeln!(w, "# true_lambda_min_over_sqrt_p\t{t:.6}")?;
        }
        writeln!(w, "# mean_conditional_f\t{}", join(&self.mean_conditional_f))?;
        writeln!(w, "# snps_used_mean_sd\t{:.3}\t{:.3}", self.mean_snps_used, self.sd_snps_used)?;
        for m in &self.methods {
            let tau = m.mean_tau2.map(|t| format!("\tmean_tau2={t:.6e}")).unwrap_or_default();
            writeln!(w, "# {}\tfailures={}\tmean_phi={:.6e}{tau}", m.method, m.failures, m.mean_phi)?;
        }
        writeln!(w, "method\texposure\tbeta0\tmean_est\tsd\tmean_se\tcoverage\tn_ok")?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{}",
                r.method, r.exposure, r.beta0, r.mean_est, r.sd, r.mean_se, r.coverage, r.n_ok
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn config(reps: usize) -> SimConfig {
        let text = r#"
mode = "summary"
estimators = ["mv_ivw", "srivw"]
[summary]
causal = "beta_a"
strength = "first_weak"
divisor = 2.5
"#;
        SimConfig::from_toml_str(text, Path::new("."), Some(17), Some(reps)).unwrap()
    }

    #[test]
    fn identical_replications_have_zero_sd() {
        let c = config(2);
        let prep = Prepared::new(&c).unwrap();
        let one = run_replication(&c, &prep, &c.estimators, 0);
        let t = aggregate(&c, &c.estimators, &[one.clone(), one], None).unwrap();
        assert!(t.rows.iter().all(|r| r.sd == 0.0));
    }

    #[test]
    fn reproducible_and_well_formed() {
        let c = config(12);
        let a = monte_carlo(&c, &c.estimators).unwrap();
        let b = monte_carlo(&c, &c.estimators).unwrap();
        let (mut ta, mut tb) = (Vec::new(), Vec::new());
        a.write_tsv(&mut ta).unwrap();
        b.write_tsv(&mut tb).unwrap();
        assert_eq!(ta, tb);
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.coverage) && r.sd >= 0.0);
            assert_eq!(r.n_ok, 12);
        }
    }

    #[test]
    fn failures_abort_above_one_percent() {
        let c = config(3);
        let prep = Prepared::new(&c).unwrap();
        let mut outs: Vec<RepOutcome> = (0..3).map(|r| run_replication(&c, &prep, &c.estimators, r)).collect();
        outs[1].estimates[0] = Err("boom".into());
        assert!(matches!(aggregate(&c, &c.estimators, &outs, None), Err(Error::TooManyFailures { .. })));
    }
}
