//! Rank-m Gaussian factor model for the outcome residual covariance: maximum
//! likelihood fit by EM, identifiability diagnostics, rank selection and the
//! loading-inflation relaxation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::data::Contrast;
use crate::error::{Error, Result};
use crate::linalg;

/// Floor on each uniqueness, relative to that outcome's sample variance.
pub const DELTA_FLOOR_REL: f64 = 1e-6;
pub const EM_REL_TOL: f64 = 1e-9;
pub const EM_MAX_ITER: usize = 5000;
pub const IDENT_RANK_TOL: f64 = 1e-8;

/// Fitted `Cov(Y | T, X) = gamma gamma' + diag(delta)`.
///
/// `gamma` is only identified up to an orthogonal rotation from the right. Every
/// quantity the crate derives from it goes through rotation-invariant functionals
/// (`contrast_loading_norm`, `loading_gram`, singular values, projections).
#[derive(Debug, Clone)]
pub struct FactorModel {
    gamma: DMatrix<f64>,
    delta: DVector<f64>,
    loglik: f64,
    n_used: usize,
}

impl FactorModel {
    /// Build a model from given loadings and noise variances (loglik unknown, set NaN).
    pub fn new(gamma: DMatrix<f64>, delta: DVector<f64>) -> Result<Self> {
        Self::with_fit_info(gamma, delta, f64::NAN, 0)
    }

    pub fn with_fit_info(
        gamma: DMatrix<f64>,
        delta: DVector<f64>,
        loglik: f64,
        n_used: usize,
    ) -> Result<Self> {
        if gamma.nrows() != delta.len() {
            return Err(Error::InvalidInput(format!(
                "loadings have {} rows but {} noise variances were given",
                gamma.nrows(),
                delta.len()
            )));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite loading".into()));
        }
        if delta.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::InvalidInput("noise variances must be finite and nonnegative".into()));
        }
        Ok(Self { gamma, delta, loglik, n_used })
    }

    pub fn q(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn m(&self) -> usize {
        self.gamma.ncols()
    }

    /// Raw loadings. Not rotation invariant: only `gamma * Q` for unknown orthogonal `Q` is identified.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn n_used(&self) -> usize {
        self.n_used
    }

    /// `a' Gamma` as an m-vector.
    pub fn contrast_loading(&self, a: &Contrast) -> DVector<f64> {
        self.gamma.transpose() * a.weights()
    }

    /// `||a' Gamma||`.
    pub fn contrast_loading_norm(&self, a: &Contrast) -> f64 {
        self.contrast_loading(a).norm()
    }

    /// `a' diag(Delta) a`.
    pub fn contrast_noise(&self, a: &Contrast) -> f64 {
        a.weights()
            .iter()
            .zip(self.delta.iter())
            .map(|(w, d)| w * w * d)
            .sum()
    }

    /// Model-implied residual variance of `a'Y`: `||a'Gamma||^2 + a' Delta a`.
    pub fn implied_contrast_variance(&self, a: &Contrast) -> f64 {
        self.contrast_loading(a).norm_squared() + self.contrast_noise(a)
    }

    /// `Gamma Gamma'`.
    pub fn loading_gram(&self) -> DMatrix<f64> {
        &self.gamma * self.gamma.transpose()
    }

    pub fn implied_cov(&self) -> DMatrix<f64> {
        let mut c = self.loading_gram();
        for j in 0..self.q() {
            c[(j, j)] += self.delta[j];
        }
        c
    }

    /// Singular values of `Gamma` in decreasing order.
    pub fn singular_values(&self) -> Vec<f64> {
        if self.m() == 0 {
            return Vec::new();
        }
        let mut sv: Vec<f64> = self.gamma.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    /// Same model with loadings rotated by `q` from the right.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Self {
        Self {
            gamma: &self.gamma * q,
            ..self.clone()
        }
    }
}

impl Serialize for FactorModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            m: usize,
            gamma: Vec<Vec<f64>>,
            delta: &'a [f64],
            loglik: Option<f64>,
            n_used: usize,
        }
        let gamma = self
            .gamma
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        Repr {
            m: self.m(),
            gamma,
            delta: self.delta.as_slice(),
            loglik: self.loglik.is_finite().then_some(self.loglik),
            n_used: self.n_used,
        }
        .serialize(s)
    }
}

/// EM fit together with its log-likelihood trace (original data scale).
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub model: FactorModel,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum likelihood factor analysis of an n x q residual matrix.
pub fn fit_factor_em(residuals: &DMatrix<f64>, m: usize) -> Result<FactorModel> {
    fit_factor_em_traced(residuals, m).map(|f| f.model)
}

pub fn fit_factor_em_traced(residuals: &DMatrix<f64>, m: usize) -> Result<FactorFit> {
    let n = residuals.nrows();
    if n < 2 {
        return Err(Error::TooFewRows { rows: n, required: 2 });
    }
    let s = linalg::sample_covariance(residuals);
    fit_factor_cov(&s, n, m)
}

/// EM on a given sample covariance. The iterations run on the correlation scale,
/// which makes the fit exactly equivariant to rescaling individual outcomes.
pub fn fit_factor_cov(s: &DMatrix<f64>, n: usize, m: usize) -> Result<FactorFit> {
    let q = s.nrows();
    if s.ncols() != q || q == 0 {
        return Err(Error::InvalidInput("covariance must be square and nonempty".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite residual covariance".into()));
    }
    if m > q {
        return Err(Error::InvalidInput(format!("rank {m} exceeds the {q} outcomes")));
    }
    let var: Vec<f64> = (0..q).map(|j| s[(j, j)]).collect();
    if let Some(j) = var.iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroVariance(j));
    }
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let corr = DMatrix::from_fn(q, q, |i, j| s[(i, j)] / (sd[i] * sd[j]));
    let log_det_scale: f64 = var.iter().map(|v| v.ln()).sum();
    let nf = n as f64;
    let shift = -0.5 * nf * log_det_scale;

    let (gamma_c, psi_c, trace_c, iterations, converged) = em_correlation(&corr, nf, m)?;

    let gamma = DMatrix::from_fn(q, m, |i, k| gamma_c[(i, k)] * sd[i]);
    let delta = DVector::from_fn(q, |j, _| psi_c[j] * var[j]);
    let trace: Vec<f64> = trace_c.iter().map(|ll| ll + shift).collect();
    let loglik = *trace.last().expect("trace has an initial entry");
    Ok(FactorFit {
        model: FactorModel::with_fit_info(gamma, delta, loglik, n)?,
        trace,
        iterations,
        converged,
    })
}

/// Gaussian log-likelihood of n observations with sample covariance `s` under `cov`.
pub fn gaussian_loglik(s: &DMatrix<f64>, cov: &DMatrix<f64>, n: f64) -> Option<f64> {
    let q = s.nrows() as f64;
    let ch = cov.clone().cholesky()?;
    let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = (ch.inverse() * s).trace();
    Some(-0.5 * n * (q * (2.0 * std::f64::consts::PI).ln() + log_det + trace))
}

type EmOutput = (DMatrix<f64>, DVector<f64>, Vec<f64>, usize, bool);

fn em_correlation(r: &DMatrix<f64>, n: f64, m: usize) -> Result<EmOutput> {
    let q = r.nrows();
    let floor = DELTA_FLOOR_REL;
    let implied = |g: &DMatrix<f64>, psi: &DVector<f64>| {
        let mut c = g * g.transpose();
        for j in 0..q {
            c[(j, j)] += psi[j];
        }
        c
    };
    let numeric = || Error::Numeric("factor model covariance lost positive definiteness".into());

    if m == 0 {
        let psi = DVector::from_fn(q, |j, _| r[(j, j)].max(floor));
        let g = DMatrix::zeros(q, 0);
        let ll = gaussian_loglik(r, &implied(&g, &psi), n).ok_or_else(numeric)?;
        return Ok((g, psi, vec![ll], 0, true));
    }

    let (vals, vecs) = linalg::sorted_eigen(r);
    let mut gamma = DMatrix::from_fn(q, m, |i, k| vecs[(i, k)] * vals[k].max(0.0).sqrt());
    let mut psi = DVector::from_fn(q, |j, _| {
        let communality = gamma.row(j).norm_squared();
        (r[(j, j)] - communality).max(floor)
    });

    let mut ll = gaussian_loglik(r, &implied(&gamma, &psi), n).ok_or_else(numeric)?;
    let mut trace = vec![ll];
    let eye = DMatrix::<f64>::identity(m, m);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < EM_MAX_ITER {
        iterations += 1;
        let cinv = implied(&gamma, &psi)
            .cholesky()
            .ok_or_else(numeric)?
            .inverse();
        let beta = gamma.transpose() * cinv;
        let beta_r = &beta * r;
        let ezz = &eye - &beta * &gamma + &beta_r * beta.transpose();
        let ezz_inv = ezz
            .cholesky()
            .ok_or_else(|| Error::Numeric("singular latent second moment in EM".into()))?
            .inverse();
        let new_gamma = beta_r.transpose() * ezz_inv;
        let fitted = &new_gamma * &beta_r;
        let new_psi = DVector::from_fn(q, |j, _| (r[(j, j)] - fitted[(j, j)]).max(floor));
        let new_ll = gaussian_loglik(r, &implied(&new_gamma, &new_psi), n).ok_or_else(numeric)?;
        gamma = new_gamma;
        psi = new_psi;
        trace.push(new_ll);
        let change = (new_ll - ll).abs() / ll.abs().max(1.0);
        ll = new_ll;
        if change < EM_REL_TOL {
            converged = true;
            break;
        }
    }
    Ok((gamma, psi, trace, iterations, converged))
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityReport {
    pub dimension_ok: bool,
    pub row_deletion_ok: bool,
    /// Exhaustive search (q <= 20) or greedy certificate.
    pub exhaustive: bool,
    pub per_outcome_r2: Vec<f64>,
}

/// `(q - m)^2 - q - m >= 0`.
pub fn dimension_ok(q: usize, m: usize) -> bool {
    let (q, m) = (q as i64, m as i64);
    (q - m) * (q - m) - q - m >= 0
}

/// Largest rank satisfying the dimension condition for `q` outcomes.
pub fn max_feasible_rank(q: usize) -> usize {
    (0..q).rev().find(|&m| dimension_ok(q, m)).unwrap_or(0)
}

pub fn check_identifiability(fm: &FactorModel, tol: f64) -> IdentifiabilityReport {
    let q = fm.q();
    let m = fm.m();
    let per_outcome_r2 = (0..q)
        .map(|j| {
            let l = fm.gamma.row(j).norm_squared();
            let total = l + fm.delta[j];
            if total > 0.0 { l / total } else { 0.0 }
        })
        .collect();
    let exhaustive = q <= 20;
    IdentifiabilityReport {
        dimension_ok: dimension_ok(q, m),
        row_deletion_ok: row_deletion_ok(&fm.gamma, tol, exhaustive),
        exhaustive,
        per_outcome_r2,
    }
}

fn row_deletion_ok(gamma: &DMatrix<f64>, tol: f64, exhaustive: bool) -> bool {
    let (q, m) = gamma.shape();
    if m == 0 {
        return true;
    }
    if q < 2 * m + 1 {
        return false;
    }
    let smax = gamma.singular_values().max();
    if smax <= 0.0 {
        return false;
    }
    let threshold = tol * smax;
    let rank_of = |rows: &[usize]| -> usize {
        if rows.is_empty() {
            return 0;
        }
        linalg::rank_abs(&gamma.select_rows(rows.iter()), threshold)
    };
    (0..q).all(|deleted| {
        let remaining: Vec<usize> = (0..q).filter(|&i| i != deleted).collect();
        if rank_of(&remaining) < m {
            return false;
        }
        if exhaustive {
            exhaustive_split(&remaining, m, &rank_of)
        } else {
            greedy_split(&remaining, m, &rank_of)
        }
    })
}

/// Is there an m-row full-rank block whose complement still has rank m?
fn exhaustive_split(rows: &[usize], m: usize, rank_of: &dyn Fn(&[usize]) -> usize) -> bool {
    let k = rows.len();
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let block: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
        if rank_of(&block) == m {
            let rest: Vec<usize> = rows.iter().copied().filter(|r| !block.contains(r)).collect();
            if rank_of(&rest) == m {
                return true;
            }
        }
        // next combination in lexicographic order
        let mut pos = m;
        loop {
            if pos == 0 {
                return false;
            }
            pos -= 1;
            if idx[pos] < k - m + pos {
                break;
            }
        }
        idx[pos] += 1;
        for j in (pos + 1)..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn greedy_split(rows: &[usize], m: usize, rank_of: &dyn Fn(&[usize]) -> usize) -> bool {
    let mut block: Vec<usize> = Vec::new();
    for &r in rows {
        let mut cand = block.clone();
        cand.push(r);
        if rank_of(&cand) > block.len() {
            block = cand;
        }
        if block.len() == m {
            break;
        }
    }
    if block.len() < m {
        return false;
    }
    let rest: Vec<usize> = rows.iter().copied().filter(|r| !block.contains(r)).collect();
    rank_of(&rest) == m
}

/// `||a'Gamma||^2 / (||a'Gamma||^2 + a' Delta a)`.
pub fn outcome_r2(fm: &FactorModel, a: &Contrast) -> f64 {
    let l = fm.contrast_loading(a).norm_squared();
    let total = l + fm.contrast_noise(a);
    if total > 0.0 { (l / total).clamp(0.0, 1.0) } else { 0.0 }
}

/// Attribute `d_extra` of each outcome's noise variance to confounding:
/// loadings become the Cholesky factor of `Gamma Gamma' + diag(d_extra)`.
pub fn inflate_loadings(fm: &FactorModel, d_extra: &DVector<f64>) -> Result<FactorModel> {
    let q = fm.q();
    if d_extra.len() != q {
        return Err(Error::InvalidInput(format!(
            "expected {q} extra variances, got {}",
            d_extra.len()
        )));
    }
    for j in 0..q {
        let d = d_extra[j];
        if !(d.is_finite() && d >= 0.0 && d <= fm.delta[j]) {
            return Err(Error::InvalidInput(format!(
                "extra variance {d} for outcome {} outside [0, {}]",
                j + 1,
                fm.delta[j]
            )));
        }
    }
    let mut target = fm.loading_gram();
    for j in 0..q {
        target[(j, j)] += d_extra[j];
    }
    let gamma = linalg::psd_cholesky(&target)
        .ok_or_else(|| Error::Numeric("inflated loading Gram matrix is not PSD".into()))?;
    let delta = DVector::from_fn(q, |j, _| (fm.delta[j] - d_extra[j]).max(0.0));
    FactorModel::with_fit_info(gamma, delta, fm.loglik, fm.n_used)
}

#[derive(Debug, Clone, Serialize)]
pub struct RankScore {
    pub m: usize,
    pub loglik: f64,
    pub bic: f64,
    /// Mean held-out log density per observation.
    pub cv_loglik: f64,
    /// Standard error of the per-observation difference to the best rank.
    pub cv_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSelection {
    pub m: usize,
    pub table: Vec<RankScore>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct RankOptions {
    pub folds: usize,
    pub seed: u64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { folds: 5, seed: 0 }
    }
}

/// Smallest rank whose K-fold held-out log-likelihood is within one standard error of the best.
pub fn select_rank(residuals: &DMatrix<f64>, m_max: usize, opts: RankOptions) -> Result<RankSelection> {
    let (n, q) = residuals.shape();
    let mut warnings = Vec::new();
    let limit = max_feasible_rank(q);
    let m_max = if m_max > limit {
        warnings.push(format!(
            "requested maximum rank {m_max} violates the identifiability dimension condition for q = {q}; clipped to {limit}"
        ));
        limit
    } else {
        m_max
    };
    let folds = opts.folds.clamp(2, n.max(2));
    if n < 2 * folds {
        return Err(Error::TooFewRows { rows: n, required: 2 * folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let fold_of: Vec<Vec<usize>> = (0..folds)
        .map(|k| order.iter().copied().skip(k).step_by(folds).collect())
        .collect();

    let full_s = linalg::sample_covariance(residuals);
    let jobs: Vec<(usize, usize)> = (0..=m_max)
        .flat_map(|m| (0..folds).map(move |k| (m, k)))
        .collect();
    let results: Vec<Result<Vec<(usize, f64)>>> = jobs
        .par_iter()
        .map(|&(m, k)| {
            let test = &fold_of[k];
            let train: Vec<usize> = (0..folds)
                .filter(|&j| j != k)
                .flat_map(|j| fold_of[j].iter().copied())
                .collect();
            let xtr = residuals.select_rows(train.iter());
            let means = linalg::column_means(&xtr);
            let fit = fit_factor_em(&xtr, m)?;
            let cov = fit.implied_cov();
            let ch = cov
                .cholesky()
                .ok_or_else(|| Error::Numeric("held-out covariance not positive definite".into()))?;
            let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let c0 = -0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            Ok(test
                .iter()
                .map(|&i| {
                    let x = residuals.row(i).transpose() - &means;
                    let z = ch.solve(&x);
                    (i, c0 - 0.5 * x.dot(&z))
                })
                .collect())
        })
        .collect();

    let mut per_obs = vec![vec![0.0; n]; m_max + 1];
    for ((m, _), res) in jobs.iter().zip(results) {
        for (i, v) in res? {
            per_obs[*m][i] = v;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let scores: Vec<f64> = per_obs.iter().map(|v| mean(v)).collect();
    let best = (0..=m_max)
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .expect("at least rank 0");

    let mut table = Vec::with_capacity(m_max + 1);
    for m in 0..=m_max {
        let diff: Vec<f64> = (0..n).map(|i| per_obs[best][i] - per_obs[m][i]).collect();
        let dm = mean(&diff);
        let var = diff.iter().map(|d| (d - dm).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let fit = fit_factor_cov(&full_s, n, m)?;
        let k = (q * (m + 1)) as f64 - (m * m.saturating_sub(1)) as f64 / 2.0;
        let ll = fit.model.loglik;
        table.push(RankScore {
            m,
            loglik: ll,
            bic: -2.0 * ll + k * (n as f64).ln(),
            cv_loglik: scores[m],
            cv_se: se,
        });
    }
    let m = table
        .iter()
        .find(|row| row.cv_loglik >= scores[best] - row.cv_se)
        .map(|row| row.m)
        .unwrap_or(best);
    Ok(RankSelection { m, table, warnings })
}
