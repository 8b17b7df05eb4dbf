//! Command-line front end: `simulate`, `fit`, `analyze`, `robustness`, `calibrate`, `report`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use crate::analysis::{self, AnalysisConfig, FactorSummary, RankChoice};
use crate::calibration;
use crate::data::{self, Contrast, Dataset, Schema, TreatmentContrast};
use crate::error::{Error, Result};
use crate::null_controls::{self, FeasibilityPolicy, NullControlOptions};
use crate::robustness::{self, RobustnessReport};
use crate::simulation::{self, SimConfig};
use crate::svg;

#[derive(Debug, Parser)]
#[command(name = "factorsens", version, about = "Sensitivity analysis for multi-outcome studies with factor-structured confounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known effects (data.csv and truth.csv).
    Simulate(SimulateArgs),
    /// Fit the outcome regression and residual factor model (fit.json).
    Fit(FitArgs),
    /// Full analysis (report.json, intervals.svg, benchmark.csv).
    Analyze(AnalyzeArgs),
    /// Robustness values only (robustness.json).
    Robustness(RobustnessArgs),
    /// Covariate benchmarks (benchmark.csv).
    Calibrate(CalibrateArgs),
    /// Re-render intervals.svg from a saved report.json.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub q: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// Number of observed covariates.
    #[arg(long, default_value_t = 0)]
    pub p: usize,
    /// Squared norm of the treatment-confounder partial correlations.
    #[arg(long, default_value_t = 0.5)]
    pub rho2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Direct effects: one value for every outcome, or a comma list of q values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub tau: Option<Vec<f64>>,
    /// Fraction of latent columns that are caused by the treatment.
    #[arg(long, default_value_t = 0.0)]
    pub mediator_mix: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub outcomes: Vec<String>,
    #[arg(long)]
    pub treatment: String,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Treatment is coded 0/1.
    #[arg(long)]
    pub binary: bool,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, usize)> {
        let schema = Schema {
            outcomes: self.outcomes.clone(),
            treatment: self.treatment.clone(),
            covariates: self.covariates.clone(),
            binary_treatment: self.binary,
        };
        let loaded = data::load_dataset(&self.data, &schema)?;
        Ok((loaded.dataset, loaded.dropped_rows))
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Fixed number of latent factors.
    #[arg(long, conflicts_with = "auto_rank")]
    pub rank: Option<usize>,
    /// Choose the rank by cross-validated likelihood (default when --rank is absent).
    #[arg(long)]
    pub auto_rank: bool,
    /// Largest rank considered by --auto-rank.
    #[arg(long)]
    pub max_rank: Option<usize>,
    /// Rescale outcomes to unit variance before fitting.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RankArgs {
    fn choice(&self) -> RankChoice {
        match self.rank {
            Some(m) => RankChoice::Fixed(m),
            None => RankChoice::Auto(self.max_rank),
        }
    }
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    /// One-based indices of outcomes assumed to have no causal effect.
    #[arg(long, value_delimiter = ',')]
    pub null_controls: Vec<usize>,
    /// Relative singular-value cutoff for the control-loading pseudoinverse.
    #[arg(long, default_value_t = 1e-8)]
    pub pinv_tol: f64,
    /// Project infeasible control effects onto the loading column space instead of failing.
    #[arg(long)]
    pub project_controls: bool,
}

impl ControlArgs {
    fn zero_based(&self) -> Result<Vec<usize>> {
        self.null_controls
            .iter()
            .map(|&j| {
                j.checked_sub(1)
                    .ok_or_else(|| Error::InvalidInput("null-control indices are one-based".into()))
            })
            .collect()
    }

    fn options(&self) -> NullControlOptions {
        NullControlOptions {
            pinv_tol: self.pinv_tol,
            policy: if self.project_controls { FeasibilityPolicy::Project } else { FeasibilityPolicy::Error },
            ..NullControlOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ContrastArgs {
    /// Outcome weights as a comma list; repeat for several contrasts.
    #[arg(long = "contrast", allow_hyphen_values = true)]
    pub contrasts: Vec<String>,
}

impl ContrastArgs {
    fn parse(&self, q: usize) -> Result<Vec<Contrast>> {
        self.contrasts
            .iter()
            .enumerate()
            .map(|(k, text)| {
                let w = text
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidInput(format!("contrast {text:?}: {s:?} is not a number")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if w.len() != q {
                    return Err(Error::InvalidInput(format!(
                        "contrast {text:?} has {} weights for {q} outcomes",
                        w.len()
                    )));
                }
                Contrast::new(DVector::from_vec(w), format!("contrast{}", k + 1))
            })
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub rank: RankArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub rank: RankArgs,
    #[command(flatten)]
    pub controls: ControlArgs,
    #[command(flatten)]
    pub contrast: ContrastArgs,
    /// Sensitivity budgets R^2 for the treatment-confounder association.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub r2: Vec<f64>,
    /// Tail probability for odds-ratio conversions (binary treatment).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Bootstrap replicates; 0 disables the bootstrap.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Reselect the rank inside every bootstrap replicate.
    #[arg(long)]
    pub reselect_rank: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub rank: RankArgs,
    #[command(flatten)]
    pub controls: ControlArgs,
    #[command(flatten)]
    pub contrast: ContrastArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub contrast: ContrastArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json written by `analyze`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, &text)?;
    Ok(text)
}

fn canonical_contrasts(d: &Dataset) -> Vec<Contrast> {
    d.outcome_names()
        .iter()
        .enumerate()
        .map(|(j, name)| Contrast::canonical(d.q(), j, name.clone()))
        .collect()
}

fn contrasts_or_default(args: &ContrastArgs, d: &Dataset) -> Result<Vec<Contrast>> {
    let c = args.parse(d.q())?;
    Ok(if c.is_empty() { canonical_contrasts(d) } else { c })
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = if (args.q, args.m) == (10, 2) {
        SimConfig::reference()
    } else {
        SimConfig::with_shape(args.n, args.q, args.m, args.p)
    };
    cfg.n = args.n;
    cfg.p = args.p;
    cfg.rho_norm2 = args.rho2;
    cfg.seed = args.seed;
    cfg.mediator_mix = args.mediator_mix;
    if let Some(tau) = &args.tau {
        cfg.tau_true = match tau.len() {
            1 => DVector::from_element(args.q, tau[0]),
            k if k == args.q => DVector::from_vec(tau.clone()),
            k => return Err(Error::InvalidInput(format!("--tau has {k} values for {} outcomes", args.q))),
        };
    }
    let truth = simulation::generate(&cfg)?;
    simulation::write_truth_files(&truth, &args.out)
}

#[derive(Serialize)]
struct FitOutput<'a> {
    schema_version: u32,
    n: usize,
    dropped_rows: usize,
    outcomes: &'a [String],
    tau_check: Vec<f64>,
    sigma2_treatment: f64,
    factor: &'a FactorSummary,
    warnings: &'a [String],
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let (d, dropped_rows) = args.data.load()?;
    let fitted = analysis::fit_models(&d, args.rank.choice(), args.rank.seed, args.rank.standardize)?;
    fs::create_dir_all(&args.out)?;
    let out = FitOutput {
        schema_version: analysis::SCHEMA_VERSION,
        n: fitted.dataset.n(),
        dropped_rows,
        outcomes: fitted.dataset.outcome_names(),
        tau_check: fitted.fit.tau_check.iter().copied().collect(),
        sigma2_treatment: fitted.fit.sigma2,
        factor: &fitted.factor,
        warnings: &fitted.warnings,
    };
    write_json(&args.out.join("fit.json"), &out)?;
    Ok(())
}

fn analysis_config(args: &AnalyzeArgs, d: &Dataset) -> Result<AnalysisConfig> {
    Ok(AnalysisConfig {
        rank: args.rank.choice(),
        r2: args.r2.clone(),
        null_controls: args.controls.zero_based()?,
        lambda_alpha: args.lambda,
        contrasts: args.contrast.parse(d.q())?,
        treatment_contrast: TreatmentContrast::unit(),
        bootstrap: args.bootstrap,
        seed: args.rank.seed,
        level: args.level,
        nc_options: args.controls.options(),
        reselect_rank: args.reselect_rank,
        standardize: args.rank.standardize,
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let (d, dropped_rows) = args.data.load()?;
    let cfg = analysis_config(args, &d)?;
    let mut report = analysis::run_analysis(&d, &cfg)?;
    report.data.dropped_rows = dropped_rows;
    fs::create_dir_all(&args.out)?;
    let text = write_json(&args.out.join("report.json"), &report)?;
    // the plot is rendered from the serialized text, never from in-memory state
    let value: serde_json::Value = serde_json::from_str(&text)?;
    fs::write(args.out.join("intervals.svg"), svg::render_intervals(&value)?)?;
    let labels: Vec<String> = report.outcomes.iter().map(|o| o.label.clone()).collect();
    calibration::write_benchmark_csv(&report.benchmark, &labels, fs::File::create(args.out.join("benchmark.csv"))?)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

#[derive(Serialize)]
struct RobustnessOutput {
    schema_version: u32,
    null_controls: Vec<usize>,
    r2_min: Option<f64>,
    rows: Vec<RobustnessRow>,
}

#[derive(Serialize)]
struct RobustnessRow {
    #[serde(flatten)]
    values: RobustnessReport,
    lambda: Option<analysis::RvSet>,
}

pub fn cmd_robustness(args: &RobustnessArgs) -> Result<()> {
    let (d, _) = args.data.load()?;
    if args.lambda.is_some() && !d.binary_treatment() {
        return Err(Error::InvalidInput("odds-ratio conversions need a binary treatment".into()));
    }
    let fitted = analysis::fit_models(&d, args.rank.choice(), args.rank.seed, args.rank.standardize)?;
    let (d, fit, fm) = (&fitted.dataset, &fitted.fit, &fitted.factor.model);
    let tc = TreatmentContrast::unit();
    let controls = args.controls.zero_based()?;
    let nca = if controls.is_empty() {
        None
    } else {
        Some(null_controls::analyze_null_controls(fm, fit, &controls, &tc, &args.controls.options())?)
    };
    let mean_t = d.treatment().sum() / d.n() as f64;
    let to_lambda = |rv: Option<f64>| -> Result<Option<f64>> {
        match (rv, args.lambda) {
            (Some(v), Some(alpha)) if v < 1.0 => analysis::capped(calibration::rv_to_lambda(v, fit.sigma2, mean_t, alpha)),
            _ => Ok(None),
        }
    };
    let rows = contrasts_or_default(&args.contrast, d)?
        .iter()
        .map(|a| {
            let values = robustness::report_robustness(fm, fit, a, &tc, nca.as_ref());
            let lambda = match args.lambda {
                Some(_) => Some(analysis::RvSet {
                    rv1: to_lambda(Some(values.rv1))?,
                    xrv: to_lambda(Some(values.xrv))?,
                    rv_gamma: to_lambda(values.rv_gamma)?,
                    rv_combined: to_lambda(values.rv_combined)?,
                }),
                None => None,
            };
            Ok(RobustnessRow { values, lambda })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out)?;
    let out = RobustnessOutput {
        schema_version: analysis::SCHEMA_VERSION,
        null_controls: controls.iter().map(|j| j + 1).collect(),
        r2_min: nca.as_ref().map(|n| n.r2_min),
        rows,
    };
    write_json(&args.out.join("robustness.json"), &out)?;
    Ok(())
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let (d, _) = args.data.load()?;
    if args.lambda.is_some() && !d.binary_treatment() {
        return Err(Error::InvalidInput("odds-ratio benchmarks need a binary treatment (--binary)".into()));
    }
    let contrasts = contrasts_or_default(&args.contrast, &d)?;
    let rows = calibration::benchmark_table(&d, &contrasts, args.lambda)?;
    fs::create_dir_all(&args.out)?;
    let labels: Vec<String> = contrasts.iter().map(|c| c.label().to_string()).collect();
    calibration::write_benchmark_csv(&rows, &labels, fs::File::create(args.out.join("benchmark.csv"))?)?;
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("intervals.svg"), svg::render_intervals(&value)?)?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Robustness(a) => cmd_robustness(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("factorsens").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn analyze_flags_parse() {
        let cli = parse(&[
            "analyze", "--data", "d.csv", "--outcomes", "y1,y2,y3", "--treatment", "t", "--covariates", "x1,x2",
            "--rank", "1", "--r2", "0.2,0.5", "--null-controls", "1", "--contrast", "-1,1,0", "--contrast", "0,0,1",
            "--bootstrap", "10", "--seed", "3", "--out", "o",
        ]);
        let Command::Analyze(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.data.outcomes, vec!["y1", "y2", "y3"]);
        assert_eq!(a.r2, vec![0.2, 0.5]);
        assert_eq!(a.controls.zero_based().unwrap(), vec![0]);
        assert_eq!(a.rank.choice(), RankChoice::Fixed(1));
        let c = a.contrast.parse(3).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].weights()[0], -1.0);
        assert!(a.contrast.parse(2).is_err());
    }

    #[test]
    fn rank_flags_conflict() {
        let err = Cli::try_parse_from([
            "factorsens", "fit", "--data", "d", "--outcomes", "y", "--treatment", "t", "--rank", "2", "--auto-rank",
            "--out", "o",
        ]);
        assert!(err.is_err());
        let cli = parse(&["fit", "--data", "d", "--outcomes", "y", "--treatment", "t", "--auto-rank", "--out", "o"]);
        let Command::Fit(f) = cli.command else { panic!() };
        assert_eq!(f.rank.choice(), RankChoice::Auto(None));
    }

    #[test]
    fn zero_control_index_is_rejected() {
        let c = ControlArgs { null_controls: vec![0], pinv_tol: 1e-8, project_controls: false };
        assert!(c.zero_based().is_err());
    }

    #[test]
    fn unit_squared_correlation_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["factorsens", "simulate", "--rho2", "1.0", "--out", out]), 2);
        assert_eq!(run(["factorsens", "simulate", "--n", "50", "--rho2", "0.3", "--out", out]), 0);
        assert!(dir.path().join("data.csv").exists());
        assert_eq!(run(["factorsens", "simulate", "--n", "50", "--tau", "1,2", "--out", out]), 2);
    }
}
