//! Observed-data regression stage: outcome means, residuals, residual treatment
//! variance, and the logistic propensity model used for binary treatments.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Contrast, Dataset};
use crate::error::{Error, Result};
use crate::linalg;

/// Relative residual norm below which a design column counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct ObservedFit {
    /// Per-unit-of-T effects estimated under no unobserved confounding.
    pub tau_check: DVector<f64>,
    /// (p + 2) x q coefficients; rows are intercept, treatment, covariates.
    pub coef: DMatrix<f64>,
    pub outcome_residuals: DMatrix<f64>,
    /// Sample covariance of the outcome residuals (denominator n - 1).
    pub residual_cov: DMatrix<f64>,
    /// Residual variance of T given X with denominator n - p - 1.
    pub sigma2: f64,
    /// Intercept then covariate coefficients of the T-on-X regression.
    pub treatment_coef: DVector<f64>,
    pub n: usize,
    pub p: usize,
}

impl ObservedFit {
    /// Fit summary from known quantities, without residuals or coefficients.
    pub fn from_parts(tau_check: DVector<f64>, sigma2: f64, residual_cov: DMatrix<f64>) -> Result<Self> {
        let q = tau_check.len();
        if residual_cov.shape() != (q, q) {
            return Err(Error::InvalidInput("residual covariance must be q x q".into()));
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!("treatment residual variance {sigma2} must be positive")));
        }
        let mut coef = DMatrix::zeros(2, q);
        coef.set_row(1, &tau_check.transpose());
        Ok(Self {
            tau_check,
            coef,
            outcome_residuals: DMatrix::zeros(0, q),
            residual_cov,
            sigma2,
            treatment_coef: DVector::zeros(1),
            n: 0,
            p: 0,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Sample residual variance of the contrast, `a' S a`.
    pub fn sigma2_ay(&self, a: &Contrast) -> f64 {
        let w = a.weights();
        (w.transpose() * &self.residual_cov * w)[(0, 0)]
    }

    pub fn q(&self) -> usize {
        self.tau_check.len()
    }

    /// OLS standard error of `a' tau_check`; `None` for fits built from parts.
    pub fn nuc_std_error(&self, a: &Contrast) -> Option<f64> {
        if self.n == 0 || self.n < self.p + 3 {
            return None;
        }
        let rss_t = self.sigma2 * (self.n - self.p - 1) as f64;
        let resid_var = self.sigma2_ay(a) * (self.n - 1) as f64 / (self.n - self.p - 2) as f64;
        Some((resid_var / rss_t).sqrt())
    }
}

/// Least squares of every outcome on `[1, T, X]` plus the `T ~ [1, X]` regression.
pub fn fit_observed(d: &Dataset) -> Result<ObservedFit> {
    let n = d.n();
    let p = d.p();
    let mut names = vec!["(intercept)".to_string()];
    names.extend(d.covariate_names().iter().cloned());
    names.push("treatment".to_string());
    let mut check_cols = vec![DVector::from_element(n, 1.0)];
    check_cols.extend(d.covariates().column_iter().map(|c| c.into_owned()));
    check_cols.push(d.treatment().clone());
    let offending = collinear_columns(&check_cols);
    if !offending.is_empty() {
        return Err(Error::RankDeficient {
            columns: offending.into_iter().map(|k| names[k].clone()).collect(),
        });
    }

    let design = outcome_design(d);
    let coef = least_squares(&design, d.outcomes())?;
    let residuals = d.outcomes() - &design * &coef;

    let tdesign = intercept_design(d.covariates());
    let tcoef_m = least_squares(&tdesign, &DMatrix::from_column_slice(n, 1, d.treatment().as_slice()))?;
    let tres = d.treatment() - &tdesign * tcoef_m.column(0);
    let dof = (n - p - 1) as f64;
    let sigma2 = tres.norm_squared() / dof;
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::Numeric("residual treatment variance is not positive".into()));
    }
    let residual_cov = (residuals.transpose() * &residuals) / ((n - 1) as f64);
    Ok(ObservedFit {
        tau_check: coef.row(1).transpose(),
        coef,
        outcome_residuals: residuals,
        residual_cov,
        sigma2,
        treatment_coef: tcoef_m.column(0).into_owned(),
        n,
        p,
    })
}

/// `[1, T, X]`.
pub fn outcome_design(d: &Dataset) -> DMatrix<f64> {
    let n = d.n();
    let p = d.p();
    let mut m = DMatrix::zeros(n, p + 2);
    m.column_mut(0).fill(1.0);
    m.set_column(1, d.treatment());
    for j in 0..p {
        m.set_column(j + 2, &d.covariates().column(j));
    }
    m
}

/// `[1, X]`.
pub fn intercept_design(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut m = DMatrix::zeros(n, x.ncols() + 1);
    m.column_mut(0).fill(1.0);
    for j in 0..x.ncols() {
        m.set_column(j + 1, &x.column(j));
    }
    m
}

/// Full-rank least squares through a thin QR factorisation.
pub fn least_squares(design: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = design.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numeric("singular triangular factor in least squares".into()))
}

/// Indices of columns lying (numerically) in the span of the columns before them.
fn collinear_columns(cols: &[DVector<f64>]) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (k, c) in cols.iter().enumerate() {
        let norm0 = c.norm();
        if norm0 == 0.0 {
            bad.push(k);
            continue;
        }
        let mut v = c.clone();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
        }
        let rn = v.norm();
        if rn / norm0 < COLLINEAR_TOL {
            bad.push(k);
        } else {
            basis.push(v / rn);
        }
    }
    bad
}

/// Coefficient of determination of `y` on `[1, design]`, tolerant of collinear columns.
pub fn r_squared(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if tss <= 0.0 {
        return Err(Error::InvalidInput("response has zero variance".into()));
    }
    let full = intercept_design(design);
    let (pinv, _) = linalg::pseudo_inverse(&full, 1e-10);
    let fitted = &full * (pinv * y);
    let rss = (y - fitted).norm_squared();
    Ok((1.0 - rss / tss).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityModel {
    /// Intercept then coefficients of the covariates in `covariates`.
    pub coef: Vec<f64>,
    /// Covariate indices (into the dataset) used by this model.
    pub covariates: Vec<usize>,
    #[serde(skip)]
    pub fitted: DVector<f64>,
    pub mean_propensity: f64,
    pub iterations: usize,
}

impl PropensityModel {
    pub fn n(&self) -> usize {
        self.fitted.len()
    }

    /// `e(x_i) / (1 - e(x_i))`.
    pub fn odds(&self, i: usize) -> f64 {
        let e = self.fitted[i];
        e / (1.0 - e)
    }
}

pub const PROPENSITY_CLAMP: f64 = 1e-12;
const NEWTON_GRAD_TOL: f64 = 1e-8;
const SEPARATION_NORM: f64 = 1e4;

/// Logistic regression of T on all covariates.
pub fn fit_propensity(d: &Dataset) -> Result<PropensityModel> {
    let all: Vec<usize> = (0..d.p()).collect();
    fit_propensity_with(d, &all)
}

/// Logistic regression of T on the listed covariates (plus intercept), by Newton's method.
pub fn fit_propensity_with(d: &Dataset, covariates: &[usize]) -> Result<PropensityModel> {
    if !d.binary_treatment() {
        return Err(Error::InvalidInput("propensity model requires a binary treatment".into()));
    }
    let t = d.treatment();
    let n = d.n();
    let treated = t.sum();
    if treated == 0.0 || treated == n as f64 {
        return Err(Error::SingleClass);
    }
    let x = intercept_design(&d.covariates().select_columns(covariates.iter()));
    let k = x.ncols();
    let mut beta = DVector::zeros(k);
    let rate = treated / n as f64;
    beta[0] = (rate / (1.0 - rate)).ln();

    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = &x * b;
        eta.iter()
            .zip(t.iter())
            .map(|(&e, &ti)| ti * e - softplus(e))
            .sum()
    };

    let mut ll = loglik(&beta);
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..200 {
        iterations = it + 1;
        let eta = &x * &beta;
        let prob = eta.map(sigmoid);
        let grad = x.transpose() * (t - &prob);
        if grad.norm() < NEWTON_GRAD_TOL {
            converged = true;
            break;
        }
        let w = prob.map(|p| p * (1.0 - p));
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let hess = x.transpose() * xw;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let norm = beta.norm();
                return Err(Error::PerfectSeparation { norm });
            }
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_ll = loglik(&cand);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.norm() > SEPARATION_NORM {
            return Err(Error::PerfectSeparation { norm: beta.norm() });
        }
    }
    let fitted_raw = (&x * &beta).map(sigmoid);
    let saturated = fitted_raw
        .iter()
        .zip(t.iter())
        .all(|(&p, &ti)| (p - ti).abs() < 1e-6);
    if saturated {
        return Err(Error::PerfectSeparation { norm: beta.norm() });
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "logistic regression did not converge in {iterations} iterations"
        )));
    }
    let fitted = fitted_raw.map(|p| p.clamp(PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP));
    let mean_propensity = fitted.sum() / n as f64;
    Ok(PropensityModel {
        coef: beta.iter().copied().collect(),
        covariates: covariates.to_vec(),
        fitted,
        mean_propensity,
        iterations,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
