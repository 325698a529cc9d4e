//! Command-line front end: `estimate`, `strength`, `outliers`, `simulate`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::Serialize;
use serde_json::json;

use crate::diagnostics::remove_outliers;
use crate::error::{Error, Result};
use crate::estimators::{estimate, Method};
use crate::simulate::config::ConfigFile;
use crate::simulate::{monte_carlo, SimConfig};
use crate::strength::strength_report;
use crate::summary_data::{default_correlation_path, load_dataset, write_dataset};
use crate::tuning::{select_phi_with, write_q_trace, GridOptions, TuneMode, DEFAULT_C, DEFAULT_STEP, WEAK_IV_THRESHOLD};
use crate::{Dataset, Estimate};

/// Worker threads for `simulate`; defaults to all cores.
pub const THREADS_ENV: &str = "SRIVW_THREADS";

#[derive(Parser, Debug)]
#[command(name = "srivw", version, about = "Spectral-regularized multivariable MR from summary statistics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate direct causal effects.
    Estimate(EstimateArgs),
    /// IV strength matrix, λ̂min/√p and conditional F-statistics.
    Strength(StrengthArgs),
    /// Iterative Q-based outlier removal.
    Outliers(OutlierArgs),
    /// Monte Carlo study from a TOML config.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Summary statistics TSV.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Number of exposures.
    #[arg(short)]
    pub k: usize,
    /// K×K exposure correlation file; defaults to `<input>.corr` when present, else identity.
    #[arg(long)]
    pub correlation: Option<PathBuf>,
}

impl InputArgs {
    fn correlation_path(&self) -> Option<PathBuf> {
        self.correlation.clone().or_else(|| {
            let p = default_correlation_path(&self.input);
            p.exists().then_some(p)
        })
    }

    fn load(&self) -> Result<Dataset> {
        load_dataset(&self.input, self.k, self.correlation_path().as_deref())
    }

    fn paths(&self) -> Vec<PathBuf> {
        std::iter::once(self.input.clone()).chain(self.correlation_path()).collect()
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMethod {
    Ivw,
    Srivw,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Table,
}

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "srivw")]
    pub method: BaseMethod,
    /// Balanced horizontal pleiotropy correction.
    #[arg(long, conflicts_with = "overlap")]
    pub pleiotropy: bool,
    /// Sample-overlap correction (needs cov_xy columns).
    #[arg(long)]
    pub overlap: bool,
    /// Fixed regularization parameter.
    #[arg(long, conflicts_with = "tune")]
    pub phi: Option<f64>,
    /// Choose φ on the grid by minimizing Q (default for SRIVW).
    #[arg(long)]
    pub tune: bool,
    #[arg(long, default_value_t = DEFAULT_C)]
    pub grid_c: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub grid_step: f64,
    /// Write the (φ, Q) trace as TSV.
    #[arg(long)]
    pub dump_q: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct StrengthArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: StrengthFormat,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrengthFormat {
    Tsv,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct OutlierArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Family-wise level; the per-SNP threshold is the χ²₁ quantile at 1 − alpha/p.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub max_iter: usize,
    /// JSON report; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Pruned dataset TSV.
    #[arg(long)]
    pub pruned: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `reps` in the config.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Required; overrides any seed in the config.
    #[arg(long)]
    pub seed: u64,
    /// MetricsTable TSV; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Also write the MetricsTable as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Written next to every output file as `<output>.manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: Option<ConfigFile>,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub wall_time_secs: f64,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    fn write_beside(&self, output: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(manifest_path(output))?);
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Io(e.into()))
    }
}

struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: Option<ConfigFile>,
    seed: Option<u64>,
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn warn_weak(lam: f64) {
    if lam < WEAK_IV_THRESHOLD {
        warn!("lambda_min/sqrt(p) = {lam:.3} is below {WEAK_IV_THRESHOLD}: weak instruments, MV-IVW is unreliable");
    }
}

fn resolve_method(a: &EstimateArgs) -> Result<Method> {
    match (a.method, a.pleiotropy, a.overlap) {
        (BaseMethod::Ivw, false, false) => Ok(Method::MvIvw),
        (BaseMethod::Ivw, _, _) => Err(Error::Validation(
            "--pleiotropy and --overlap apply to --method srivw only".into(),
        )),
        (BaseMethod::Srivw, true, _) => Ok(Method::SrivwPleiotropy),
        (BaseMethod::Srivw, _, true) => Ok(Method::SrivwOverlap),
        (BaseMethod::Srivw, false, false) => Ok(Method::Srivw),
    }
}

/// The estimate produced by `estimate`; exposed so tests can compare against the CLI.
pub fn run_estimate(data: &Dataset, args: &EstimateArgs) -> Result<(Estimate, Option<crate::TuningResult>)> {
    let method = resolve_method(args)?;
    if method == Method::MvIvw {
        if args.phi.is_some() || args.tune {
            return Err(Error::Validation("--phi/--tune apply to --method srivw only".into()));
        }
        return Ok((estimate(data, method, 0.0)?, None));
    }
    match args.phi {
        Some(phi) => Ok((estimate(data, method, phi)?, None)),
        None => {
            let opts = GridOptions {
                c: args.grid_c,
                step: args.grid_step,
            };
            let mode = TuneMode::for_method(method).expect("SRIVW family");
            let t = select_phi_with(data, mode, opts)?;
            Ok((t.selected_estimate.clone(), Some(t)))
        }
    }
}

fn estimate_json(e: &Estimate, lam: f64) -> serde_json::Value {
    let k = e.beta.len();
    let cov: Vec<Vec<f64>> = (0..k).map(|r| (0..k).map(|c| e.covariance[(r, c)]).collect()).collect();
    json!({
        "method": e.method,
        "beta": e.beta.as_slice(),
        "se": e.se.as_slice(),
        "cov": cov,
        "phi": e.phi,
        "tau2": e.tau2,
        "tau2_raw": e.tau2_raw,
        "ci95": e.ci95().iter().map(|&(l, u)| [l, u]).collect::<Vec<_>>(),
        "p": e.p_used,
        "lambda_min_over_sqrt_p": lam,
    })
}

fn estimate_table(e: &Estimate, lam: f64, w: &mut dyn Write) -> io::Result<()> {
    writeln!(w, "method: {}   p = {}   phi = {:.6e}   lambda_min/sqrt(p) = {lam:.4}", e.method, e.p_used, e.phi)?;
    if let Some(t) = e.tau2 {
        writeln!(w, "tau2 = {t:.6e} (raw {:.6e})", e.tau2_raw.unwrap_or(t))?;
    }
    writeln!(w, "{:>8} {:>14} {:>14} {:>14} {:>14}", "exposure", "beta", "se", "ci95_lo", "ci95_hi")?;
    for (i, (lo, hi)) in e.ci95().into_iter().enumerate() {
        writeln!(w, "{:>8} {:>14.6} {:>14.6} {:>14.6} {:>14.6}", i + 1, e.beta[i], e.se[i], lo, hi)?;
    }
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<Outcome> {
    let data = a.input.load()?;
    let lam = strength_report(&data)?.lambda_min_over_sqrt_p;
    warn_weak(lam);
    let (est, tuning) = run_estimate(&data, a)?;
    let mut outputs: Vec<PathBuf> = a.out.iter().cloned().collect();
    if let Some(path) = &a.dump_q {
        let t = tuning
            .as_ref()
            .ok_or_else(|| Error::Validation("--dump-q needs a tuned SRIVW estimate".into()))?;
        write_q_trace(t, path)?;
        outputs.push(path.clone());
    }
    let mut w = open_out(a.out.as_deref())?;
    match a.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &estimate_json(&est, lam)).map_err(|e| Error::Io(e.into()))?;
            writeln!(w)?;
        }
        Format::Table => estimate_table(&est, lam, &mut w)?,
    }
    w.flush()?;
    Ok(Outcome {
        inputs: a.input.paths(),
        outputs,
        config: None,
        seed: None,
    })
}

fn cmd_strength(a: &StrengthArgs) -> Result<Outcome> {
    let data = a.input.load()?;
    let r = strength_report(&data)?;
    warn_weak(r.lambda_min_over_sqrt_p);
    let mut w = open_out(a.out.as_deref())?;
    match a.format {
        StrengthFormat::Json => {
            serde_json::to_writer_pretty(&mut w, &r).map_err(|e| Error::Io(e.into()))?;
            writeln!(w)?;
        }
        StrengthFormat::Tsv => {
            writeln!(w, "# p\t{}", r.p)?;
            writeln!(w, "# lambda_min\t{:.16e}", r.lambda_min)?;
            writeln!(w, "statistic\texposure\tvalue")?;
            writeln!(w, "lambda_min_over_sqrt_p\t.\t{:.16e}", r.lambda_min_over_sqrt_p)?;
            for (i, f) in r.conditional_f.iter().enumerate() {
                writeln!(w, "conditional_f\t{}\t{f:.16e}", i + 1)?;
            }
            let k = r.strength_matrix.nrows();
            for a in 0..k {
                for b in 0..k {
                    writeln!(w, "strength_matrix\t{},{}\t{:.16e}", a + 1, b + 1, r.strength_matrix[(a, b)])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(Outcome {
        inputs: a.input.paths(),
        outputs: a.out.iter().cloned().collect(),
        config: None,
        seed: None,
    })
}

fn cmd_outliers(a: &OutlierArgs) -> Result<Outcome> {
    let data = a.input.load()?;
    warn_weak(strength_report(&data)?.lambda_min_over_sqrt_p);
    let (pruned, report) = remove_outliers(&data, a.alpha, a.max_iter)?;
    let mut outputs: Vec<PathBuf> = a.out.iter().cloned().collect();
    if let Some(p) = &a.pruned {
        write_dataset(&pruned, p)?;
        outputs.push(p.clone());
    }
    let mut w = open_out(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(Outcome {
        inputs: a.input.paths(),
        outputs,
        config: None,
        seed: None,
    })
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} = {v:?} is not a thread count")))?;
    // A second call in the same process keeps the first pool; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome> {
    configure_threads()?;
    let cfg = SimConfig::from_file(&a.config, Some(a.seed), a.reps)?;
    let table = monte_carlo(&cfg, &cfg.estimators)?;
    warn_weak(table.mean_lambda_min_over_sqrt_p);
    let mut outputs: Vec<PathBuf> = a.out.iter().cloned().collect();
    if let Some(p) = &a.json {
        let w = BufWriter::new(File::create(p)?);
        serde_json::to_writer_pretty(w, &table).map_err(|e| Error::Io(e.into()))?;
        outputs.push(p.clone());
    }
    let mut w = open_out(a.out.as_deref())?;
    table.write_tsv(&mut w)?;
    w.flush()?;
    Ok(Outcome {
        inputs: vec![a.config.clone()],
        outputs,
        config: Some(cfg.source.clone()),
        seed: Some(cfg.seed),
    })
}

/// Parse `argv` and run; returns the process exit status (0 ok, 2 usage/validation, 1 internal).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let start = Instant::now();
    let (name, result) = match &cli.command {
        Command::Estimate(a) => ("estimate", cmd_estimate(a)),
        Command::Strength(a) => ("strength", cmd_strength(a)),
        Command::Outliers(a) => ("outliers", cmd_outliers(a)),
        Command::Simulate(a) => ("simulate", cmd_simulate(a)),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            let missing_input = matches!(&e, Error::Io(io) if io.kind() == io::ErrorKind::NotFound);
            return if e.is_user_error() || missing_input { 2 } else { 1 };
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        args: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        inputs: outcome.inputs,
        outputs: outcome.outputs.clone(),
        config: outcome.config,
        seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    for out in &outcome.outputs {
        if let Err(e) = manifest.write_beside(out) {
            eprintln!("error: writing manifest for {}: {e}", out.display());
            return 1;
        }
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("srivw").chain(args.iter().copied()))
    }

    #[test]
    fn parses_estimate_flags() {
        let c = parse(&["estimate", "--method", "srivw", "--tune", "-i", "d.tsv", "-k", "3"]).unwrap();
        let Command::Estimate(a) = c.command else { panic!() };
        assert_eq!(resolve_method(&a).unwrap(), Method::Srivw);
        assert!(a.tune && a.phi.is_none());
        assert_eq!(a.input.k, 3);
    }

    #[test]
    fn phi_and_tune_conflict() {
        assert!(parse(&["estimate", "--phi", "1", "--tune", "-i", "d", "-k", "1"]).is_err());
        assert!(parse(&["estimate", "--pleiotropy", "--overlap", "-i", "d", "-k", "1"]).is_err());
    }

    #[test]
    fn ivw_rejects_corrections() {
        let c = parse(&["estimate", "--method", "ivw", "--pleiotropy", "-i", "d", "-k", "1"]).unwrap();
        let Command::Estimate(a) = c.command else { panic!() };
        assert!(matches!(resolve_method(&a), Err(Error::Validation(_))));
    }

    #[test]
    fn simulate_needs_seed() {
        assert!(parse(&["simulate", "--config", "c.toml"]).is_err());
        assert!(parse(&["simulate", "--config", "c.toml", "--seed", "4"]).is_ok());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["srivw", "--bogus"]), 2);
        assert_eq!(run(["srivw", "strength", "-i", "/nonexistent/x.tsv", "-k", "2"]), 2);
    }

    #[test]
    fn manifest_name() {
        assert_eq!(manifest_path(Path::new("a/t.tsv")), PathBuf::from("a/t.tsv.manifest.json"));
    }
}
