//! End-to-end analysis of one dataset: observed fit, factor model, bounds, null controls,
//! robustness values, calibration and the optional bootstrap, gathered into one report.

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::erf::erf_inv;

use crate::bounds::{self, GlobalBound, IgnoranceRegion, RegionMode};
use crate::calibration::{self, BenchmarkRow};
use crate::data::{self, Contrast, Dataset, SensitivityQuery, TreatmentContrast};
use crate::error::{Error, Result};
use crate::factor::{self, FactorModel, IdentifiabilityReport, RankOptions, RankSelection};
use crate::null_controls::{self, NullControlAnalysis, NullControlOptions, WidthFactor};
use crate::regression::{self, ObservedFit};
use crate::robustness::{self, RobustnessReport};
use crate::uncertainty::{self, BootstrapContext, BootstrapResult, Statistic, Statistics};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    /// Cross-validated selection up to the given rank (default: largest identifiable rank).
    Auto(Option<usize>),
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub rank: RankChoice,
    pub r2: Vec<f64>,
    /// Zero-based null-control outcome indices.
    pub null_controls: Vec<usize>,
    /// Tail probability for odds-ratio conversions; binary treatments only.
    pub lambda_alpha: Option<f64>,
    /// Empty means one canonical contrast per outcome.
    pub contrasts: Vec<Contrast>,
    pub treatment_contrast: TreatmentContrast,
    pub bootstrap: usize,
    pub seed: u64,
    pub level: f64,
    pub nc_options: NullControlOptions,
    /// Re-run rank selection inside each bootstrap replicate.
    pub reselect_rank: bool,
    pub standardize: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            rank: RankChoice::Auto(None),
            r2: vec![0.5],
            null_controls: Vec::new(),
            lambda_alpha: None,
            contrasts: Vec::new(),
            treatment_contrast: TreatmentContrast::unit(),
            bootstrap: 0,
            seed: 0,
            level: 0.95,
            nc_options: NullControlOptions::default(),
            reselect_rank: false,
            standardize: false,
        }
    }
}

impl AnalysisConfig {
    fn validate(&self, d: &Dataset) -> Result<()> {
        if self.r2.is_empty() {
            return Err(Error::InvalidInput("at least one sensitivity budget is required".into()));
        }
        for &r2 in &self.r2 {
            if !(0.0..1.0).contains(&r2) || !r2.is_finite() {
                return Err(Error::BudgetOutOfRange(r2));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!("level {} outside (0, 1)", self.level)));
        }
        if let Some(alpha) = self.lambda_alpha {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
            }
            if !d.binary_treatment() {
                return Err(Error::InvalidInput("odds-ratio conversions need a binary treatment".into()));
            }
        }
        if let Some(bad) = self.contrasts.iter().find(|c| c.len() != d.q()) {
            return Err(Error::InvalidInput(format!(
                "contrast {} has {} weights but there are {} outcomes",
                bad.label(),
                bad.len(),
                d.q()
            )));
        }
        if !self.null_controls.is_empty() {
            data::validate_controls(&self.null_controls, d.q())?;
        }
        Ok(())
    }

    fn contrasts_for(&self, d: &Dataset) -> Vec<Contrast> {
        if self.contrasts.is_empty() {
            d.outcome_names()
                .iter()
                .enumerate()
                .map(|(j, name)| Contrast::canonical(d.q(), j, name.clone()))
                .collect()
        } else {
            self.contrasts.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NucSummary {
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// Normal-approximation interval at the configured level.
    pub interval: Option<Interval>,
    pub bootstrap: Option<Interval>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRegions {
    pub r2: f64,
    pub factor: IgnoranceRegion,
    pub extreme: IgnoranceRegion,
    pub null_control: Option<IgnoranceRegion>,
    pub width_factor: Option<WidthFactor>,
    pub bootstrap_factor: Option<Interval>,
    pub bootstrap_null_control: Option<Interval>,
}

/// One value per robustness variant; absent entries are undefined for the contrast.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RvSet {
    pub rv1: Option<f64>,
    pub xrv: Option<f64>,
    pub rv_gamma: Option<f64>,
    pub rv_combined: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutcomeRow {
    pub label: String,
    pub contrast: Vec<f64>,
    pub nuc: NucSummary,
    pub loading_norm: f64,
    pub projected_loading_norm: Option<f64>,
    pub regions: Vec<BudgetRegions>,
    pub robustness: RobustnessReport,
    /// Robustness values expressed on the odds-ratio scale.
    pub robustness_lambda: Option<RvSet>,
    /// Lower bootstrap percentile of each robustness value.
    pub robustness_conservative: Option<RvSet>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRow {
    pub r2: f64,
    pub global: GlobalBound,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub n: usize,
    pub q: usize,
    pub p: usize,
    pub outcomes: Vec<String>,
    pub covariates: Vec<String>,
    pub binary_treatment: bool,
    pub standardized: bool,
    pub outcome_scale: Option<Vec<f64>>,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub rank: RankChoice,
    pub r2: Vec<f64>,
    /// One-based, as given on the command line.
    pub null_controls: Vec<usize>,
    pub lambda_alpha: Option<f64>,
    pub treatment_contrast: TreatmentContrast,
    pub bootstrap: usize,
    pub seed: u64,
    pub level: f64,
    pub pinv_tol: f64,
    pub project_controls: bool,
    pub reselect_rank: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorSummary {
    pub m: usize,
    pub selection: Option<RankSelection>,
    pub model: FactorModel,
    pub iterations: usize,
    pub converged: bool,
    pub identifiability: IdentifiabilityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapMeta {
    pub b: usize,
    pub seed: u64,
    pub level: f64,
    pub failed_replicates: usize,
    pub retries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub data: DataSummary,
    pub settings: Settings,
    pub sigma2_treatment: f64,
    pub mean_treatment: f64,
    pub factor: FactorSummary,
    pub null_controls: Option<NullControlAnalysis>,
    pub budgets: Vec<BudgetRow>,
    /// Orthonormal basis vectors of contrasts free of confounding bias.
    pub identified_contrasts: Vec<Vec<f64>>,
    pub outcomes: Vec<OutcomeRow>,
    pub benchmark: Vec<BenchmarkRow>,
    pub bootstrap: Option<BootstrapMeta>,
    pub warnings: Vec<String>,
}

/// Outcome data after optional standardisation, with the scale used.
fn prepare(d: &Dataset, standardize: bool) -> Result<(Dataset, Option<Vec<f64>>)> {
    if standardize {
        let (s, scale) = data::standardize_outcomes(d)?;
        Ok((s, Some(scale.iter().copied().collect())))
    } else {
        Ok((d.clone(), None))
    }
}

fn choose_rank(residuals: &DMatrix<f64>, rank: RankChoice, seed: u64) -> Result<(usize, Option<RankSelection>)> {
    match rank {
        RankChoice::Fixed(m) => Ok((m, None)),
        RankChoice::Auto(max) => {
            let q = residuals.ncols();
            let m_max = max.unwrap_or_else(|| factor::max_feasible_rank(q));
            let sel = factor::select_rank(residuals, m_max, RankOptions { seed, ..RankOptions::default() })?;
            Ok((sel.m, Some(sel)))
        }
    }
}

fn stat_key(contrast: usize, what: &str, budget: Option<usize>) -> String {
    match budget {
        Some(k) => format!("{contrast:04}/{what}/{k:04}"),
        None => format!("{contrast:04}/{what}"),
    }
}

/// Statistics of one (re)sample for the bootstrap. Individual statistics that are undefined
/// on the sample (e.g. a budget below that sample's minimum) are omitted, not fatal.
fn replicate_statistics(d: &Dataset, cfg: &AnalysisConfig, contrasts: &[Contrast], m: usize) -> Result<Statistics> {
    let fit = regression::fit_observed(d)?;
    let m = if cfg.reselect_rank {
        choose_rank(&fit.outcome_residuals, cfg.rank, cfg.seed)?.0
    } else {
        m
    };
    let fm = factor::fit_factor_em(&fit.outcome_residuals, m)?;
    let tc = cfg.treatment_contrast;
    let nca = if cfg.null_controls.is_empty() {
        None
    } else {
        null_controls::analyze_null_controls(&fm, &fit, &cfg.null_controls, &tc, &cfg.nc_options).ok()
    };
    let mut s = Statistics::new();
    for (i, a) in contrasts.iter().enumerate() {
        s.insert(stat_key(i, "nuc", None), Statistic::Value(bounds::nuc_effect(&fit, a, &tc)));
        for (k, &r2) in cfg.r2.iter().enumerate() {
            let q = SensitivityQuery::new(a.clone(), tc, r2, Vec::new())?;
            let reg = bounds::ignorance_region(&fm, &fit, &q, RegionMode::Factor)?;
            s.insert(stat_key(i, "factor", Some(k)), Statistic::Region { lower: reg.lower, upper: reg.upper });
            if let Some(Ok(reg)) = nca.as_ref().map(|n| n.region(&fm, &fit, a, r2)) {
                s.insert(stat_key(i, "nc", Some(k)), Statistic::Region { lower: reg.lower, upper: reg.upper });
            }
        }
        let rv = robustness::report_robustness(&fm, &fit, a, &tc, nca.as_ref());
        s.insert(stat_key(i, "rv1", None), Statistic::Robustness(rv.rv1));
        s.insert(stat_key(i, "xrv", None), Statistic::Robustness(rv.xrv));
        if let Some(v) = rv.rv_gamma {
            s.insert(stat_key(i, "rv_gamma", None), Statistic::Robustness(v));
        }
        if let Some(v) = rv.rv_combined {
            s.insert(stat_key(i, "rv_combined", None), Statistic::Robustness(v));
        }
    }
    Ok(s)
}

fn bootstrap_interval(r: Option<&BootstrapResult>) -> Option<Interval> {
    match r? {
        BootstrapResult::Region { lower, upper, .. } | BootstrapResult::Value { lower, upper, .. } => {
            Some(Interval { lower: *lower, upper: *upper })
        }
        BootstrapResult::Robustness { .. } => None,
    }
}

fn conservative(r: Option<&BootstrapResult>) -> Option<f64> {
    match r? {
        BootstrapResult::Robustness { conservative, .. } => Some(*conservative),
        _ => None,
    }
}

/// Odds-ratio values beyond the search cap are reported as absent rather than failing the run.
pub(crate) fn capped(v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(x) => Ok(Some(x)),
        Err(Error::Numeric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Two-sided standard normal quantile for the central `level` mass.
fn normal_quantile(level: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(level)
}

fn mean(v: &nalgebra::DVector<f64>) -> f64 {
    v.sum() / v.len() as f64
}

/// Run every stage on `d` and assemble the report.
pub fn run_analysis(d: &Dataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    cfg.validate(d)?;
    let (d, outcome_scale) = prepare(d, cfg.standardize)?;
    let contrasts = cfg.contrasts_for(&d);
    let tc = cfg.treatment_contrast;
    let mut warnings = Vec::new();

    let fit = regression::fit_observed(&d)?;
    let (m, selection) = choose_rank(&fit.outcome_residuals, cfg.rank, cfg.seed)?;
    if let Some(sel) = &selection {
        warnings.extend(sel.warnings.iter().cloned());
    }
    if !factor::dimension_ok(d.q(), m) {
        warnings.push(format!(
            "rank {m} violates the identifiability dimension condition for {} outcomes",
            d.q()
        ));
    }
    let ff = factor::fit_factor_em_traced(&fit.outcome_residuals, m)?;
    if !ff.converged {
        warnings.push(format!("factor EM stopped after {} iterations without converging", ff.iterations));
    }
    let fm = ff.model.clone();
    let ident = factor::check_identifiability(&fm, factor::IDENT_RANK_TOL);
    if m > 0 && !ident.row_deletion_ok {
        warnings.push("loadings fail the row-deletion condition; rotation identifiability is not guaranteed".into());
    }

    let nca = if cfg.null_controls.is_empty() {
        None
    } else {
        let n = null_controls::analyze_null_controls(&fm, &fit, &cfg.null_controls, &tc, &cfg.nc_options)?;
        if n.projected {
            warnings.push(format!(
                "null-control effects projected onto the loading column space (relative residual {:.3e})",
                n.relative_residual
            ));
        }
        Some(n)
    };

    let mean_treatment = mean(d.treatment());
    let lambda_for = |r2: f64| -> Result<Option<f64>> {
        match cfg.lambda_alpha {
            Some(alpha) => capped(calibration::lambda_alpha(r2, fit.sigma2, mean_treatment, alpha)),
            None => Ok(None),
        }
    };
    let rv_lambda = |rv: Option<f64>| -> Result<Option<f64>> {
        match (rv, cfg.lambda_alpha) {
            (Some(v), Some(alpha)) if v < 1.0 => capped(calibration::rv_to_lambda(v, fit.sigma2, mean_treatment, alpha)),
            _ => Ok(None),
        }
    };

    let budgets = cfg
        .r2
        .iter()
        .map(|&r2| {
            Ok(BudgetRow {
                r2,
                global: bounds::global_bound(&fm, &fit, &tc, r2)?,
                lambda: lambda_for(r2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let identified_contrasts = match bounds::identified_contrasts(&fm) {
        Ok(basis) => basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
        Err(Error::EmptyNullSpace) => Vec::new(),
        Err(e) => return Err(e),
    };

    let boot = if cfg.bootstrap > 0 {
        let ctx = BootstrapContext::new(cfg.bootstrap, cfg.seed, cfg.level)?;
        let summary = uncertainty::bootstrap_analysis(&d, |s| replicate_statistics(s, cfg, &contrasts, m), &ctx)?;
        if summary.failed_replicates > 0 {
            warnings.push(format!(
                "{} of {} bootstrap replicates failed after retries",
                summary.failed_replicates, summary.b
            ));
        }
        Some(summary)
    } else {
        None
    };
    let stat = |key: String| boot.as_ref().and_then(|b| b.statistics.get(&key));

    let z = normal_quantile(cfg.level);
    let mut outcomes = Vec::with_capacity(contrasts.len());
    for (i, a) in contrasts.iter().enumerate() {
        let estimate = bounds::nuc_effect(&fit, a, &tc);
        let std_error = fit.nuc_std_error(a).map(|se| se * tc.delta().abs());
        let nuc = NucSummary {
            estimate,
            std_error,
            interval: std_error.map(|se| Interval { lower: estimate - z * se, upper: estimate + z * se }),
            bootstrap: bootstrap_interval(stat(stat_key(i, "nuc", None))),
        };
        let mut regions = Vec::with_capacity(cfg.r2.len());
        for (k, &r2) in cfg.r2.iter().enumerate() {
            let q = SensitivityQuery::new(a.clone(), tc, r2, Vec::new())?;
            let (null_control, width_factor) = match &nca {
                Some(n) => (
                    Some(n.region(&fm, &fit, a, r2)?),
                    Some(null_controls::width_reduction_factor(&fm, a, n, r2)?),
                ),
                None => (None, None),
            };
            regions.push(BudgetRegions {
                r2,
                factor: bounds::ignorance_region(&fm, &fit, &q, RegionMode::Factor)?,
                extreme: bounds::ignorance_region(&fm, &fit, &q, RegionMode::Extreme)?,
                null_control,
                width_factor,
                bootstrap_factor: bootstrap_interval(stat(stat_key(i, "factor", Some(k)))),
                bootstrap_null_control: bootstrap_interval(stat(stat_key(i, "nc", Some(k)))),
            });
        }
        let rv = robustness::report_robustness(&fm, &fit, a, &tc, nca.as_ref());
        let robustness_lambda = if cfg.lambda_alpha.is_some() {
            Some(RvSet {
                rv1: rv_lambda(Some(rv.rv1))?,
                xrv: rv_lambda(Some(rv.xrv))?,
                rv_gamma: rv_lambda(rv.rv_gamma)?,
                rv_combined: rv_lambda(rv.rv_combined)?,
            })
        } else {
            None
        };
        let robustness_conservative = boot.as_ref().map(|_| RvSet {
            rv1: conservative(stat(stat_key(i, "rv1", None))),
            xrv: conservative(stat(stat_key(i, "xrv", None))),
            rv_gamma: conservative(stat(stat_key(i, "rv_gamma", None))),
            rv_combined: conservative(stat(stat_key(i, "rv_combined", None))),
        });
        outcomes.push(OutcomeRow {
            label: a.label().to_string(),
            contrast: a.weights().iter().copied().collect(),
            nuc,
            loading_norm: fm.contrast_loading_norm(a),
            projected_loading_norm: nca.as_ref().map(|n| n.projected_loading_norm(&fm, a)),
            regions,
            robustness: rv,
            robustness_lambda,
            robustness_conservative,
        });
    }

    let benchmark = calibration::benchmark_table(&d, &contrasts, cfg.lambda_alpha)?;

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        data: DataSummary {
            n: d.n(),
            q: d.q(),
            p: d.p(),
            outcomes: d.outcome_names().to_vec(),
            covariates: d.covariate_names().to_vec(),
            binary_treatment: d.binary_treatment(),
            standardized: cfg.standardize,
            outcome_scale,
            dropped_rows: 0,
        },
        settings: Settings {
            rank: cfg.rank,
            r2: cfg.r2.clone(),
            null_controls: cfg.null_controls.iter().map(|j| j + 1).collect(),
            lambda_alpha: cfg.lambda_alpha,
            treatment_contrast: tc,
            bootstrap: cfg.bootstrap,
            seed: cfg.seed,
            level: cfg.level,
            pinv_tol: cfg.nc_options.pinv_tol,
            project_controls: cfg.nc_options.policy == null_controls::FeasibilityPolicy::Project,
            reselect_rank: cfg.reselect_rank,
        },
        sigma2_treatment: fit.sigma2,
        mean_treatment,
        factor: FactorSummary {
            m,
            selection,
            model: fm,
            iterations: ff.iterations,
            converged: ff.converged,
            identifiability: ident,
        },
        null_controls: nca,
        budgets,
        identified_contrasts,
        outcomes,
        benchmark,
        bootstrap: boot.map(|b| BootstrapMeta {
            b: b.b,
            seed: b.seed,
            level: b.level,
            failed_replicates: b.failed_replicates,
            retries: b.retries,
        }),
        warnings,
    })
}

/// Fitted pieces shared by the lighter subcommands.
pub struct FittedModel {
    pub dataset: Dataset,
    pub fit: ObservedFit,
    pub factor: FactorSummary,
    pub warnings: Vec<String>,
}

pub fn fit_models(d: &Dataset, rank: RankChoice, seed: u64, standardize: bool) -> Result<FittedModel> {
    let (d, _) = prepare(d, standardize)?;
    let fit = regression::fit_observed(&d)?;
    let (m, selection) = choose_rank(&fit.outcome_residuals, rank, seed)?;
    let ff = factor::fit_factor_em_traced(&fit.outcome_residuals, m)?;
    let identifiability = factor::check_identifiability(&ff.model, factor::IDENT_RANK_TOL);
    let mut warnings = selection.as_ref().map(|s| s.warnings.clone()).unwrap_or_default();
    if !ff.converged {
        warnings.push(format!("factor EM stopped after {} iterations without converging", ff.iterations));
    }
    Ok(FittedModel {
        dataset: d,
        fit,
        factor: FactorSummary {
            m,
            selection,
            model: ff.model,
            iterations: ff.iterations,
            converged: ff.converged,
            identifiability,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate, SimConfig};

    fn sim(n: usize, seed: u64) -> crate::simulation::SimTruth {
        let mut cfg = SimConfig::reference();
        cfg.n = n;
        cfg.seed = seed;
        generate(&cfg).unwrap()
    }

    #[test]
    fn zero_budget_gives_points_at_the_nuc_estimate() {
        let t = sim(400, 1);
        let cfg = AnalysisConfig { rank: RankChoice::Fixed(2), r2: vec![0.0], ..Default::default() };
        let rep = run_analysis(&t.dataset, &cfg).unwrap();
        for row in &rep.outcomes {
            let reg = &row.regions[0].factor;
            assert_eq!(reg.halfwidth, 0.0);
            assert_eq!(reg.center, row.nuc.estimate);
        }
        assert_eq!(rep.schema_version, SCHEMA_VERSION);
        assert_eq!(rep.outcomes.len(), 10);
    }

    #[test]
    fn null_controls_never_widen_regions() {
        let t = sim(600, 2);
        let base = AnalysisConfig { rank: RankChoice::Fixed(2), r2: vec![0.5, 0.8], ..Default::default() };
        let with_nc = AnalysisConfig { null_controls: vec![0], ..base.clone() };
        let a = run_analysis(&t.dataset, &base).unwrap();
        let b = match run_analysis(&t.dataset, &with_nc) {
            Ok(r) => r,
            Err(Error::BudgetBelowMinimum { .. }) => return,
            Err(e) => panic!("{e}"),
        };
        for (ra, rb) in a.outcomes.iter().zip(&b.outcomes) {
            for (ga, gb) in ra.regions.iter().zip(&rb.regions) {
                let nc = gb.null_control.as_ref().unwrap();
                assert!(nc.halfwidth <= ga.factor.halfwidth + 1e-12);
                assert!(ga.factor.encloses(nc, 1e-9));
            }
        }
        assert_eq!(b.settings.null_controls, vec![1]);
    }

    #[test]
    fn lambda_requires_binary_treatment() {
        let t = sim(200, 3);
        let cfg = AnalysisConfig { rank: RankChoice::Fixed(2), lambda_alpha: Some(0.05), ..Default::default() };
        assert!(matches!(run_analysis(&t.dataset, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bootstrap_fields_present_and_deterministic() {
        let t = sim(150, 4);
        let cfg = AnalysisConfig {
            rank: RankChoice::Fixed(2),
            bootstrap: 12,
            seed: 9,
            null_controls: vec![0],
            r2: vec![0.9],
            ..Default::default()
        };
        let a = serde_json::to_string(&run_analysis(&t.dataset, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_analysis(&t.dataset, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let rep = run_analysis(&t.dataset, &cfg).unwrap();
        let row = &rep.outcomes[3];
        let env = row.regions[0].bootstrap_factor.as_ref().unwrap();
        assert!(env.lower <= env.upper);
        assert!(row.robustness_conservative.as_ref().unwrap().rv1.is_some());
        assert!(row.nuc.bootstrap.is_some());
    }

    #[test]
    fn custom_contrast_and_identified_basis() {
        let t = sim(300, 5);
        let w = nalgebra::DVector::from_fn(10, |j, _| if j < 2 { 1.0 } else { 0.0 });
        let cfg = AnalysisConfig {
            rank: RankChoice::Fixed(2),
            contrasts: vec![Contrast::new(w, "sum12").unwrap()],
            ..Default::default()
        };
        let rep = run_analysis(&t.dataset, &cfg).unwrap();
        assert_eq!(rep.outcomes.len(), 1);
        assert_eq!(rep.outcomes[0].label, "sum12");
        assert_eq!(rep.identified_contrasts.len(), 8);
        let bad = AnalysisConfig {
            contrasts: vec![Contrast::new(nalgebra::DVector::from_element(3, 1.0), "short").unwrap()],
            ..cfg
        };
        assert!(run_analysis(&t.dataset, &bad).is_err());
    }

    #[test]
    fn normal_quantile_matches_table() {
        assert!((normal_quantile(0.95) - 1.959963984540054).abs() < 1e-9);
    }
}
