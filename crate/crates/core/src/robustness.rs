//! Robustness values: the smallest treatment-confounder partial R^2 that would
//! explain away an effect estimate, under four sets of assumptions.

use serde::Serialize;

use crate::bounds::nuc_effect;
use crate::data::{Contrast, TreatmentContrast};
use crate::factor::FactorModel;
use crate::null_controls::NullControlAnalysis;
use crate::regression::ObservedFit;

/// `||a'Gamma P_perp|| / ||a'Gamma||` below this marks the contrast as identified.
pub const PROJECTION_DEGENERACY_TOL: f64 = 1e-8;
/// Relative size below which a loading or effect counts as exactly zero.
const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RvStatus {
    Finite,
    /// Identified contrast whose (corrected) effect is zero.
    IdentifiedZero,
    /// Identified contrast with a nonzero effect: no budget explains it away.
    IdentifiedNonzero,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub label: String,
    pub rv1: f64,
    pub xrv: f64,
    pub rv_gamma: Option<f64>,
    pub rv_combined: Option<f64>,
    pub r2_min: Option<f64>,
    pub status: RvStatus,
    pub combined_status: Option<RvStatus>,
}

/// `f^2 = sigma^2 (a'tau)^2 / sigma^2_{a'Y}` with the model-implied residual variance.
fn signal_to_noise(fit: &ObservedFit, fm: &FactorModel, a: &Contrast) -> f64 {
    let effect = a.weights().dot(&fit.tau_check);
    if effect == 0.0 {
        return 0.0;
    }
    let var = fm.implied_contrast_variance(a);
    if var <= 0.0 {
        return f64::INFINITY;
    }
    fit.sigma2 * effect * effect / var
}

/// Equal partial R^2 for treatment and outcome that nullifies the estimate.
pub fn rv_single(fit: &ObservedFit, fm: &FactorModel, a: &Contrast, _tc: &TreatmentContrast) -> f64 {
    let f2 = signal_to_noise(fit, fm, a);
    if f2.is_infinite() {
        return 1.0;
    }
    // positive root of R^2 + f2 R - f2 = 0, written to avoid cancellation
    2.0 * f2 / (f2 + (f2 * f2 + 4.0 * f2).sqrt()).max(f64::MIN_POSITIVE)
}

/// Budget at which the bound with all residual variance attributed to confounding reaches zero.
pub fn rv_extreme(fit: &ObservedFit, fm: &FactorModel, a: &Contrast, _tc: &TreatmentContrast) -> f64 {
    let f2 = signal_to_noise(fit, fm, a);
    if f2.is_infinite() {
        return 1.0;
    }
    f2 / (1.0 + f2)
}

fn is_zero_loading(fm: &FactorModel, a: &Contrast) -> bool {
    if fm.m() == 0 {
        return true;
    }
    let scale = a.weights().norm() * fm.gamma().norm();
    fm.contrast_loading_norm(a) <= ZERO_TOL * scale
}

fn effect_status(effect: f64, scale: f64) -> RvStatus {
    if effect.abs() <= ZERO_TOL * scale.max(f64::MIN_POSITIVE) {
        RvStatus::IdentifiedZero
    } else {
        RvStatus::IdentifiedNonzero
    }
}

/// Factor-confounding robustness value.
pub fn rv_gamma(fm: &FactorModel, fit: &ObservedFit, a: &Contrast, tc: &TreatmentContrast) -> (Option<f64>, RvStatus) {
    let center = nuc_effect(fit, a, tc);
    if is_zero_loading(fm, a) {
        let scale = a.weights().norm() * fit.tau_check.norm() * tc.delta().abs();
        return match effect_status(center, scale) {
            RvStatus::IdentifiedZero => (Some(0.0), RvStatus::IdentifiedZero),
            s => (None, s),
        };
    }
    let l2 = fm.contrast_loading(a).norm_squared();
    let omega = fit.sigma2 / tc.delta().powi(2) * center * center / l2;
    (Some(omega / (1.0 + omega)), RvStatus::Finite)
}

/// Robustness value when the null-control assumptions in `nca` also hold.
pub fn rv_combined(
    fm: &FactorModel,
    fit: &ObservedFit,
    a: &Contrast,
    nca: &NullControlAnalysis,
) -> (Option<f64>, RvStatus) {
    let center = nca.corrected_center(fm, fit, a);
    let full = fm.contrast_loading_norm(a);
    let proj = nca.projected_loading_norm(fm, a);
    let degenerate = full == 0.0 || proj / full < PROJECTION_DEGENERACY_TOL;
    if degenerate {
        let scale = a.weights().norm() * (fit.tau_check.norm() * nca.delta_t.abs() + nca.tau_c.norm());
        return match effect_status(center, scale) {
            RvStatus::IdentifiedZero => (Some(nca.r2_min), RvStatus::IdentifiedZero),
            s => (None, s),
        };
    }
    let w = nca.sigma.powi(2) / nca.delta_t.powi(2) * center * center / (proj * proj) + nca.min_odds();
    (Some(w / (1.0 + w)), RvStatus::Finite)
}

/// All robustness values for one contrast. Pass `nca` to include the null-control value.
pub fn report_robustness(
    fm: &FactorModel,
    fit: &ObservedFit,
    a: &Contrast,
    tc: &TreatmentContrast,
    nca: Option<&NullControlAnalysis>,
) -> RobustnessReport {
    let (rv_g, status) = rv_gamma(fm, fit, a, tc);
    let (rv_combined, combined_status, r2_min) = match nca {
        Some(n) => {
            let (v, s) = rv_combined(fm, fit, a, n);
            (v, Some(s), Some(n.r2_min))
        }
        None => (None, None, None),
    };
    RobustnessReport {
        label: a.label().to_string(),
        rv1: rv_single(fit, fm, a, tc),
        xrv: rv_extreme(fit, fm, a, tc),
        rv_gamma: rv_g,
        rv_combined,
        r2_min,
        status,
        combined_status,
    }
}
