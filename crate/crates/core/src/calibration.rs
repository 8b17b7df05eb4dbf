//! Calibrating the sensitivity budget: partial R^2 benchmarks from observed
//! covariates, and the odds-ratio scale for binary treatments.

use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::data::{check_budget, Contrast, Dataset};
use crate::error::{Error, Result};
use crate::regression::{self, PropensityModel};

/// Upper end of the bisection bracket for the odds-ratio bound.
pub const LAMBDA_MAX: f64 = 1e6;
const LAMBDA_TOL: f64 = 1e-10;

/// `(R2_full - R2_reduced) / (1 - R2_reduced)`.
fn partial_from(full: f64, reduced: f64) -> Result<f64> {
    if reduced >= 1.0 {
        return Err(Error::Numeric("reduced model already explains all variance".into()));
    }
    Ok(((full - reduced) / (1.0 - reduced)).clamp(0.0, 1.0))
}

fn check_covariates(d: &Dataset, drop: &[usize]) -> Result<()> {
    if drop.is_empty() {
        return Err(Error::InvalidInput("no benchmark covariate given".into()));
    }
    if let Some(&j) = drop.iter().find(|&&j| j >= d.p()) {
        return Err(Error::InvalidInput(format!("covariate index {j} out of range")));
    }
    Ok(())
}

/// Share of the treatment variance left unexplained by the other covariates that `X_j` explains.
pub fn partial_r2_treatment(d: &Dataset, drop: &[usize]) -> Result<f64> {
    check_covariates(d, drop)?;
    let full = regression::r_squared(d.covariates(), d.treatment())?;
    let keep: Vec<usize> = (0..d.p()).filter(|j| !drop.contains(j)).collect();
    let reduced = regression::r_squared(&d.covariates().select_columns(keep.iter()), d.treatment())?;
    partial_from(full, reduced)
}

/// Same for the outcome contrast `a'Y`, conditioning on the treatment as well.
pub fn partial_r2_outcome(d: &Dataset, a: &Contrast, drop: &[usize]) -> Result<f64> {
    check_covariates(d, drop)?;
    if a.len() != d.q() {
        return Err(Error::InvalidInput("contrast length does not match the outcomes".into()));
    }
    let y: DVector<f64> = d.outcomes() * a.weights();
    let with_t = |cols: &[usize]| {
        let x = d.covariates().select_columns(cols.iter());
        let k = x.ncols();
        let mut x = x.insert_column(k, 0.0);
        x.set_column(k, d.treatment());
        x
    };
    let all: Vec<usize> = (0..d.p()).collect();
    let keep: Vec<usize> = all.iter().copied().filter(|j| !drop.contains(j)).collect();
    let full = regression::r_squared(&with_t(&all), &y)?;
    let reduced = regression::r_squared(&with_t(&keep), &y)?;
    partial_from(full, reduced)
}

/// Parameters of the log odds-ratio distribution implied by a treatment budget.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LambdaParams {
    pub mu_lambda: f64,
    pub sigma2_lambda: f64,
    pub mean_propensity: f64,
}

impl LambdaParams {
    pub fn new(r2: f64, sigma2: f64, mean_propensity: f64) -> Result<Self> {
        check_budget(r2)?;
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!("treatment variance {sigma2} must be positive")));
        }
        if !(mean_propensity > 0.0 && mean_propensity < 1.0) {
            return Err(Error::InvalidInput(format!("mean propensity {mean_propensity} outside (0, 1)")));
        }
        let odds = r2 / (1.0 - r2);
        let p = Self {
            mu_lambda: odds / (2.0 * sigma2),
            sigma2_lambda: odds / sigma2,
            mean_propensity,
        };
        assert!((p.sigma2_lambda - 2.0 * p.mu_lambda).abs() <= 1e-15 * p.sigma2_lambda.max(1.0));
        Ok(p)
    }

    /// CDF of `log lambda`: a two-component normal mixture with means `+mu` and `-mu`.
    pub fn log_cdf(&self, v: f64) -> f64 {
        let s = self.sigma2_lambda.sqrt();
        if s == 0.0 {
            return if v >= 0.0 { 1.0 } else { 0.0 };
        }
        let e = self.mean_propensity;
        e * std_normal_cdf((v - self.mu_lambda) / s) + (1.0 - e) * std_normal_cdf((v + self.mu_lambda) / s)
    }

    /// `P(1/Lambda <= lambda <= Lambda)`.
    pub fn band_probability(&self, lambda: f64) -> f64 {
        let l = lambda.ln();
        let s = self.sigma2_lambda.sqrt();
        if s == 0.0 {
            return 1.0;
        }
        // both mixture components give the same symmetric-band mass
        let mu = self.mu_lambda;
        std_normal_cdf((l - mu) / s) - std_normal_cdf((-l - mu) / s)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Smallest `Lambda >= 1` with `P(1/Lambda <= lambda <= Lambda) >= 1 - alpha`.
pub fn lambda_alpha(r2: f64, sigma2: f64, mean_propensity: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    let params = LambdaParams::new(r2, sigma2, mean_propensity)?;
    if r2 == 0.0 {
        return Ok(1.0);
    }
    let target = 1.0 - alpha;
    if params.band_probability(LAMBDA_MAX) < target {
        return Err(Error::Numeric(format!(
            "odds-ratio bound exceeds {LAMBDA_MAX:e}; bisection cannot bracket it"
        )));
    }
    let (mut lo, mut hi) = (1.0, LAMBDA_MAX);
    while hi - lo > LAMBDA_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if params.band_probability(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Robustness value expressed on the odds-ratio scale.
pub fn rv_to_lambda(rv: f64, sigma2: f64, mean_propensity: f64, alpha: f64) -> Result<f64> {
    lambda_alpha(rv, sigma2, mean_propensity, alpha)
}

/// Empirical `1 - alpha` quantile over units of `max(r, 1/r)`,
/// `r = odds_full(x_i) / odds_reduced(x_i)`. `alpha = 1` returns the minimum.
pub fn benchmark_lambda(full: &PropensityModel, reduced: &PropensityModel, alpha: f64) -> Result<f64> {
    if full.n() != reduced.n() {
        return Err(Error::InvalidInput(format!(
            "propensity models fitted on {} and {} rows",
            full.n(),
            reduced.n()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) || full.n() == 0 {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    let ratios: Vec<f64> = (0..full.n())
        .map(|i| {
            let r = full.odds(i) / reduced.odds(i);
            r.max(1.0 / r)
        })
        .collect();
    Ok(quantile(ratios, 1.0 - alpha))
}

/// Linear-interpolation sample quantile (the usual "type 7" definition).
pub fn quantile(mut v: Vec<f64>, prob: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub covariate: String,
    pub partial_r2_treatment: f64,
    pub partial_r2_outcomes: Vec<f64>,
    pub lambda_quantile: Option<f64>,
}

/// One row per covariate. `lambda_alpha` requests odds-ratio benchmarks (binary treatment only).
pub fn benchmark_table(d: &Dataset, contrasts: &[Contrast], lambda_alpha: Option<f64>) -> Result<Vec<BenchmarkRow>> {
    let full_pm = match lambda_alpha {
        Some(_) if !d.binary_treatment() => {
            return Err(Error::InvalidInput(
                "odds-ratio benchmarks need a binary treatment".into(),
            ))
        }
        Some(_) => Some(regression::fit_propensity(d)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(d.p());
    for j in 0..d.p() {
        let partial_r2_outcomes = contrasts
            .iter()
            .map(|a| partial_r2_outcome(d, a, &[j]))
            .collect::<Result<Vec<_>>>()?;
        let lambda_quantile = match (&full_pm, lambda_alpha) {
            (Some(pm), Some(alpha)) => {
                let keep: Vec<usize> = (0..d.p()).filter(|&k| k != j).collect();
                let reduced = regression::fit_propensity_with(d, &keep)?;
                Some(benchmark_lambda(pm, &reduced, alpha)?)
            }
            _ => None,
        };
        rows.push(BenchmarkRow {
            covariate: d.covariate_names()[j].clone(),
            partial_r2_treatment: partial_r2_treatment(d, &[j])?,
            partial_r2_outcomes,
            lambda_quantile,
        });
    }
    Ok(rows)
}

/// CSV with one column per outcome contrast.
pub fn write_benchmark_csv<W: Write>(rows: &[BenchmarkRow], labels: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["covariate".to_string(), "partial_r2_treatment".to_string()];
    header.extend(labels.iter().map(|l| format!("partial_r2_{l}")));
    header.push("lambda_quantile".to_string());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.covariate.clone(), format!("{}", r.partial_r2_treatment)];
        rec.extend(r.partial_r2_outcomes.iter().map(|v| format!("{v}")));
        rec.push(r.lambda_quantile.map(|v| format!("{v}")).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
