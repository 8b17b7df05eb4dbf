//! Worst-case confounding bias and ignorance regions under factor confounding.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{check_budget, Contrast, SensitivityQuery, TreatmentContrast};
use crate::error::{Error, Result};
use crate::factor::FactorModel;
use crate::linalg;
use crate::regression::ObservedFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Factor,
    Extreme,
    NullControl,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IgnoranceRegion {
    pub label: String,
    pub center: f64,
    pub halfwidth: f64,
    pub lower: f64,
    pub upper: f64,
    pub r2_tu: f64,
    pub mode: RegionMode,
}

impl IgnoranceRegion {
    pub fn new(label: impl Into<String>, center: f64, halfwidth: f64, r2_tu: f64, mode: RegionMode) -> Self {
        let halfwidth = halfwidth.max(0.0);
        Self {
            label: label.into(),
            center,
            halfwidth,
            lower: center - halfwidth,
            upper: center + halfwidth,
            r2_tu,
            mode,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// `other` lies inside `self`, allowing `slack` at each end.
    pub fn encloses(&self, other: &IgnoranceRegion, slack: f64) -> bool {
        self.lower - slack <= other.lower && other.upper <= self.upper + slack
    }

    pub fn crosses_zero(&self) -> bool {
        self.contains(0.0)
    }
}

/// `sqrt(R^2 / (1 - R^2))`.
pub fn confounding_multiplier(r2: f64) -> f64 {
    (r2 / (1.0 - r2)).sqrt()
}

/// Worst-case bias for a contrast with loading norm `loading_norm`.
pub fn worst_case_bias(loading_norm: f64, sigma: f64, delta_t: f64, r2: f64) -> f64 {
    if r2 == 0.0 || loading_norm == 0.0 {
        return 0.0;
    }
    delta_t.abs() / sigma * confounding_multiplier(r2) * loading_norm
}

/// `||a'Gamma||`-based bound on the confounding bias of the contrast.
pub fn bias_bound(fm: &FactorModel, fit: &ObservedFit, q: &SensitivityQuery) -> Result<f64> {
    check_budget(q.r2_tu)?;
    check_dims(fm, fit, &q.contrast)?;
    Ok(worst_case_bias(
        fm.contrast_loading_norm(&q.contrast),
        fit.sigma(),
        q.treatment_contrast.delta(),
        q.r2_tu,
    ))
}

/// Bound obtained by letting confounders explain all residual variance of `a'Y`.
/// Uses the model-implied variance `||a'Gamma||^2 + a' Delta a`.
pub fn extreme_bias_bound(fm: &FactorModel, fit: &ObservedFit, q: &SensitivityQuery) -> Result<f64> {
    check_budget(q.r2_tu)?;
    check_dims(fm, fit, &q.contrast)?;
    Ok(worst_case_bias(
        fm.implied_contrast_variance(&q.contrast).sqrt(),
        fit.sigma(),
        q.treatment_contrast.delta(),
        q.r2_tu,
    ))
}

/// Effect of the contrast between the two treatment levels under no unobserved confounding.
pub fn nuc_effect(fit: &ObservedFit, a: &Contrast, tc: &TreatmentContrast) -> f64 {
    a.weights().dot(&fit.tau_check) * tc.delta()
}

pub fn ignorance_region(
    fm: &FactorModel,
    fit: &ObservedFit,
    q: &SensitivityQuery,
    mode: RegionMode,
) -> Result<IgnoranceRegion> {
    let halfwidth = match mode {
        RegionMode::Factor => bias_bound(fm, fit, q)?,
        RegionMode::Extreme => extreme_bias_bound(fm, fit, q)?,
        RegionMode::NullControl => {
            return Err(Error::InvalidInput(
                "null-control regions are built by the null_controls module".into(),
            ))
        }
    };
    Ok(IgnoranceRegion::new(
        q.contrast.label(),
        nuc_effect(fit, &q.contrast, &q.treatment_contrast),
        halfwidth,
        q.r2_tu,
        mode,
    ))
}

/// Bias of the NUC estimate for partial correlations `rho` between treatment and confounders,
/// `a' Gamma (I - rho rho')^{-1/2} rho (t1 - t2) / sigma`.
pub fn confounding_bias(fm: &FactorModel, a: &Contrast, rho: &DVector<f64>, sigma: f64, delta_t: f64) -> f64 {
    let r = rho.norm_squared();
    assert!(r < 1.0, "partial correlations must have squared norm below one");
    // (I - rho rho') has eigenvalue 1 - r along rho and 1 elsewhere
    let whitened = rho / (1.0 - r).sqrt();
    fm.contrast_loading(a).dot(&whitened) * delta_t / sigma
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalBound {
    pub bound: f64,
    pub largest_singular_value: f64,
    /// Unit contrast attaining the bound (sign fixed so its largest entry is positive).
    pub worst_contrast: Vec<f64>,
}

/// Bound over all unit-norm contrasts, attained at the leading left singular vector of Gamma.
pub fn global_bound(fm: &FactorModel, fit: &ObservedFit, tc: &TreatmentContrast, r2: f64) -> Result<GlobalBound> {
    check_budget(r2)?;
    let q = fm.q();
    if fm.m() == 0 {
        let mut e = vec![0.0; q];
        e[0] = 1.0;
        return Ok(GlobalBound { bound: 0.0, largest_singular_value: 0.0, worst_contrast: e });
    }
    let (vals, vecs) = linalg::sorted_eigen(&fm.loading_gram());
    let d1 = vals[0].max(0.0).sqrt();
    let mut u1: Vec<f64> = vecs.column(0).iter().copied().collect();
    let pivot = u1
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(1.0);
    if pivot < 0.0 {
        u1.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(GlobalBound {
        bound: worst_case_bias(d1, fit.sigma(), tc.delta(), r2),
        largest_singular_value: d1,
        worst_contrast: u1,
    })
}

/// Orthonormal basis (columns) of `Null(Gamma')`: contrasts with no confounding bias.
pub fn identified_contrasts(fm: &FactorModel) -> Result<DMatrix<f64>> {
    let q = fm.q();
    if fm.m() == 0 {
        return Ok(DMatrix::identity(q, q));
    }
    let basis = linalg::left_null_space(fm.gamma(), linalg::DEFAULT_RANK_TOL);
    if basis.ncols() == 0 {
        return Err(Error::EmptyNullSpace);
    }
    Ok(basis)
}

/// Loadings of one covariate stratum for the heteroscedastic bound.
#[derive(Debug, Clone)]
pub struct HeteroGroup {
    pub gamma_t1: DMatrix<f64>,
    pub gamma_t2: DMatrix<f64>,
    /// `E[T | X = x]` in this stratum.
    pub treatment_mean: f64,
    pub weight: f64,
}

impl HeteroGroup {
    /// Stratum whose loadings do not depend on the treatment level.
    pub fn shared(gamma: DMatrix<f64>, treatment_mean: f64, weight: f64) -> Self {
        Self { gamma_t1: gamma.clone(), gamma_t2: gamma, treatment_mean, weight }
    }
}

/// Bias bound when loadings vary with treatment level and covariate stratum,
/// for a partial-correlation budget shared by all strata.
pub fn hetero_bias_bound(
    groups: &[HeteroGroup],
    a: &Contrast,
    tc: &TreatmentContrast,
    r2: f64,
    sigma: f64,
) -> Result<f64> {
    check_budget(r2)?;
    if groups.is_empty() {
        return Err(Error::InvalidInput("heteroscedastic bound needs at least one group".into()));
    }
    if groups.iter().any(|g| !(g.weight >= 0.0 && g.weight.is_finite())) {
        return Err(Error::InvalidInput("group weights must be nonnegative".into()));
    }
    let total: f64 = groups.iter().map(|g| g.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("group weights sum to {total}, expected 1")));
    }
    let w = a.weights();
    let mut expectation = 0.0;
    for g in groups {
        if g.gamma_t1.nrows() != w.len() || g.gamma_t2.nrows() != w.len() {
            return Err(Error::InvalidInput("group loadings do not match the contrast length".into()));
        }
        let l1 = (g.gamma_t1.transpose() * w).norm() * (tc.t1() - g.treatment_mean).abs();
        let l2 = (g.gamma_t2.transpose() * w).norm() * (tc.t2() - g.treatment_mean).abs();
        expectation += g.weight * (l1 + l2);
    }
    if r2 == 0.0 {
        return Ok(0.0);
    }
    Ok(confounding_multiplier(r2) * expectation / sigma)
}

pub(crate) fn check_dims(fm: &FactorModel, fit: &ObservedFit, a: &Contrast) -> Result<()> {
    if fm.q() != fit.q() || a.len() != fm.q() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: factor model q = {}, fit q = {}, contrast length {}",
            fm.q(),
            fit.q(),
            a.len()
        )));
    }
    Ok(())
}
