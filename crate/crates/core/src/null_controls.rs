//! Null-control outcomes: the minimum confounding budget they imply, and the
//! recentred, narrower ignorance regions they produce.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::bounds::{check_dims, IgnoranceRegion, RegionMode};
use crate::data::{check_budget, validate_controls, Contrast, SensitivityQuery, TreatmentContrast};
use crate::error::{Error, Result};
use crate::factor::FactorModel;
use crate::linalg;
use crate::regression::ObservedFit;

/// Slack allowed when comparing a budget with the minimum budget.
pub const BUDGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityPolicy {
    /// Column-space violations are an error.
    Error,
    /// Replace the control effects by their projection onto the loading column space.
    Project,
}

#[derive(Debug, Clone, Copy)]
pub struct NullControlOptions {
    pub pinv_tol: f64,
    pub colspace_tol: f64,
    pub policy: FeasibilityPolicy,
}

impl Default for NullControlOptions {
    fn default() -> Self {
        Self {
            pinv_tol: 1e-8,
            colspace_tol: 1e-8,
            policy: FeasibilityPolicy::Error,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NullControlAnalysis {
    pub controls: Vec<usize>,
    pub gamma_c: DMatrix<f64>,
    /// NUC effects of the controls in contrast units (per-unit effect times `t1 - t2`).
    pub tau_c: DVector<f64>,
    pub r2_min: f64,
    /// `pinv(Gamma_C) tau_C`.
    pub pinv_tau: DVector<f64>,
    /// `I - pinv(Gamma_C) Gamma_C`.
    pub projector: DMatrix<f64>,
    pub colspace_residual: f64,
    pub relative_residual: f64,
    pub control_rank: usize,
    /// True when `tau_c` was replaced by its column-space projection.
    pub projected: bool,
    pub sigma: f64,
    pub delta_t: f64,
}

impl NullControlAnalysis {
    /// Bias explained by the control-implied confounding, `a' Gamma pinv(Gamma_C) tau_C`.
    pub fn bias_correction(&self, fm: &FactorModel, a: &Contrast) -> f64 {
        let mut corr = fm.gamma() * &self.pinv_tau;
        for &j in &self.controls {
            corr[j] = self.tau_c_entry(j);
        }
        a.weights().dot(&corr)
    }

    fn tau_c_entry(&self, j: usize) -> f64 {
        let k = self.controls.iter().position(|&c| c == j).expect("control index");
        self.tau_c[k]
    }

    /// NUC effect minus the bias correction; exactly zero on each control outcome.
    pub fn corrected_effects(&self, fm: &FactorModel, fit: &ObservedFit) -> DVector<f64> {
        let mut out = &fit.tau_check * self.delta_t - fm.gamma() * &self.pinv_tau;
        for &j in &self.controls {
            out[j] = 0.0;
        }
        out
    }

    pub fn corrected_center(&self, fm: &FactorModel, fit: &ObservedFit, a: &Contrast) -> f64 {
        a.weights().dot(&self.corrected_effects(fm, fit))
    }

    /// `Gamma P_perp` with control rows set to exactly zero.
    pub fn projected_loadings(&self, fm: &FactorModel) -> DMatrix<f64> {
        let mut g = fm.gamma() * &self.projector;
        for &j in &self.controls {
            g.row_mut(j).fill(0.0);
        }
        g
    }

    /// `||a' Gamma P_perp||`.
    pub fn projected_loading_norm(&self, fm: &FactorModel, a: &Contrast) -> f64 {
        (self.projected_loadings(fm).transpose() * a.weights()).norm()
    }

    /// `R^2 / (1 - R^2)` of the minimum budget, `sigma^2 ||pinv(Gamma_C) tau_C||^2 / (t1 - t2)^2`.
    pub fn min_odds(&self) -> f64 {
        self.sigma.powi(2) * self.pinv_tau.norm_squared() / self.delta_t.powi(2)
    }

    /// `R^2/(1-R^2)` minus the minimum odds, written so that it is exactly zero at `r2 = r2_min`.
    fn odds_excess(&self, r2: f64) -> f64 {
        ((r2 - self.r2_min) / ((1.0 - r2) * (1.0 - self.r2_min))).max(0.0)
    }

    fn check_budget(&self, r2: f64) -> Result<()> {
        check_budget(r2)?;
        if r2 < self.r2_min - BUDGET_SLACK {
            return Err(Error::BudgetBelowMinimum { r2, r2_min: self.r2_min });
        }
        Ok(())
    }

    /// Region for contrast `a` at budget `r2`.
    pub fn region(&self, fm: &FactorModel, fit: &ObservedFit, a: &Contrast, r2: f64) -> Result<IgnoranceRegion> {
        self.check_budget(r2)?;
        let center = self.corrected_center(fm, fit, a);
        let halfwidth = self.projected_loading_norm(fm, a) * self.delta_t.abs() / self.sigma * self.odds_excess(r2).sqrt();
        Ok(IgnoranceRegion::new(a.label(), center, halfwidth, r2, RegionMode::NullControl))
    }
}

impl Serialize for NullControlAnalysis {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            controls: Vec<usize>,
            tau_c: &'a [f64],
            r2_min: f64,
            pinv_tau: &'a [f64],
            colspace_residual: f64,
            relative_residual: f64,
            control_rank: usize,
            projected: bool,
        }
        Repr {
            controls: self.controls.iter().map(|j| j + 1).collect(),
            tau_c: self.tau_c.as_slice(),
            r2_min: self.r2_min,
            pinv_tau: self.pinv_tau.as_slice(),
            colspace_residual: self.colspace_residual,
            relative_residual: self.relative_residual,
            control_rank: self.control_rank,
            projected: self.projected,
        }
        .serialize(s)
    }
}

/// Minimum budget and loading projections implied by assuming the `controls` have no effect.
pub fn analyze_null_controls(
    fm: &FactorModel,
    fit: &ObservedFit,
    controls: &[usize],
    tc: &TreatmentContrast,
    opts: &NullControlOptions,
) -> Result<NullControlAnalysis> {
    let q = fm.q();
    if fit.q() != q {
        return Err(Error::InvalidInput("factor model and fit disagree on q".into()));
    }
    if controls.is_empty() {
        return Err(Error::InvalidInput("at least one null control is required".into()));
    }
    let controls = validate_controls(controls, q)?;
    let m = fm.m();
    let c = controls.len();
    let delta_t = tc.delta();
    let gamma_c = fm.gamma().select_rows(controls.iter());
    let mut tau_c = DVector::from_iterator(c, controls.iter().map(|&j| fit.tau_check[j] * delta_t));

    let (pinv, rank) = linalg::pseudo_inverse(&gamma_c, opts.pinv_tol);
    let mut pinv_tau = &pinv * &tau_c;
    let fitted = &gamma_c * &pinv_tau;
    let colspace_residual = (&tau_c - &fitted).norm();
    let tau_norm = tau_c.norm();
    let relative_residual = if tau_norm > 0.0 { colspace_residual / tau_norm } else { 0.0 };
    let structurally_constrained = c > m || rank < c;
    let mut projected = false;
    if structurally_constrained && relative_residual > opts.colspace_tol {
        match opts.policy {
            FeasibilityPolicy::Error => {
                return Err(Error::InfeasibleNullControls { relative_residual });
            }
            FeasibilityPolicy::Project => {
                tau_c = fitted;
                pinv_tau = &pinv * &tau_c;
                projected = true;
            }
        }
    }
    let projector = if m == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let p = DMatrix::identity(m, m) - &pinv * &gamma_c;
        // symmetrise away rounding
        (&p + p.transpose()) * 0.5
    };
    let sigma = fit.sigma();
    let s = sigma.powi(2) * pinv_tau.norm_squared();
    let r2_min = s / (delta_t.powi(2) + s);
    Ok(NullControlAnalysis {
        controls,
        gamma_c,
        tau_c,
        r2_min,
        pinv_tau,
        projector,
        colspace_residual,
        relative_residual,
        control_rank: rank,
        projected,
        sigma,
        delta_t,
    })
}

/// Region for the query's contrast given its null controls.
pub fn nc_ignorance_region(
    fm: &FactorModel,
    fit: &ObservedFit,
    q: &SensitivityQuery,
    opts: &NullControlOptions,
) -> Result<(IgnoranceRegion, NullControlAnalysis)> {
    check_dims(fm, fit, &q.contrast)?;
    let nca = analyze_null_controls(fm, fit, &q.null_controls, &q.treatment_contrast, opts)?;
    let region = nca.region(fm, fit, &q.contrast, q.r2_tu)?;
    Ok((region, nca))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum WidthFactor {
    Factor(f64),
    /// `a'Gamma = 0`: the contrast is identified and the ratio is undefined.
    Identified,
}

/// Ratio of the null-control halfwidth to the unconstrained halfwidth at budget `r2`.
pub fn width_reduction_factor(
    fm: &FactorModel,
    a: &Contrast,
    nca: &NullControlAnalysis,
    r2: f64,
) -> Result<WidthFactor> {
    nca.check_budget(r2)?;
    let full = fm.contrast_loading_norm(a);
    if full == 0.0 {
        return Ok(WidthFactor::Identified);
    }
    if r2 == 0.0 {
        // both halfwidths vanish; the limit of the ratio as r2 -> 0 with r2_min = 0
        return Ok(WidthFactor::Factor(nca.projected_loading_norm(fm, a) / full));
    }
    let odds = r2 / (1.0 - r2);
    let shrink = (nca.odds_excess(r2) / odds).sqrt();
    Ok(WidthFactor::Factor((shrink * nca.projected_loading_norm(fm, a) / full).clamp(0.0, 1.0)))
}
