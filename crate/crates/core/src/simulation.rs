//! Synthetic multi-outcome studies with known latent confounding, and
//! brute-force oracles used to check the closed-form results.
//!
//! Data model (per unit):
//!
//! ```text
//! U ~ N(0, I_{m-k}),  X ~ N(0, I_p)
//! T = theta'X + rho'U + sqrt(1 - |rho|^2) e_T          (so Var(T | X) = 1)
//! M = 0.5 T + nu,  nu ~ N(0, I_k)                        (mediator columns)
//! Y = tau T + B'X + G_pre (I - rho rho')^{-1/2} U + G_med M + sqrt(Delta) e_Y
//! ```
//!
//! `k = round(mediator_mix * m)`; with `k = 0` this is the plain confounded design.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Slope of each mediator column on the treatment.
pub const MEDIATOR_SLOPE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub p: usize,
    pub gamma_true: DMatrix<f64>,
    /// Direct effects of a unit change in T.
    pub tau_true: DVector<f64>,
    pub rho_norm2: f64,
    /// Treatment-confounder partial correlations; sampled on the sphere when absent.
    pub rho: Option<DVector<f64>>,
    pub delta_true: DVector<f64>,
    pub seed: u64,
    pub mediator_mix: f64,
}

impl SimConfig {
    /// Ten outcomes, two confounders, `|rho|^2 = 0.5`, n = 1000, effects of one on outcomes 3 to 9.
    pub fn reference() -> Self {
        let mut tau = DVector::from_element(10, 1.0);
        tau[0] = 0.0;
        tau[1] = 0.0;
        tau[9] = 0.0;
        Self {
            n: 1000,
            q: 10,
            m: 2,
            p: 0,
            gamma_true: default_gamma(10, 2),
            tau_true: tau,
            rho_norm2: 0.5,
            rho: None,
            delta_true: DVector::from_element(10, 1.0),
            seed: 0,
            mediator_mix: 0.0,
        }
    }

    /// Generic shape with default loadings and unit noise.
    pub fn with_shape(n: usize, q: usize, m: usize, p: usize) -> Self {
        let mut cfg = Self::reference();
        cfg.n = n;
        cfg.q = q;
        cfg.m = m;
        cfg.p = p;
        cfg.gamma_true = default_gamma(q, m);
        cfg.delta_true = DVector::from_element(q, 1.0);
        if q != 10 {
            cfg.tau_true = DVector::zeros(q);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.q == 0 || self.n < self.p + 3 {
            return bad(format!("need q >= 1 and n >= p + 3 (n = {}, p = {})", self.n, self.p));
        }
        if self.gamma_true.shape() != (self.q, self.m) {
            return bad(format!("loadings must be {} x {}", self.q, self.m));
        }
        if self.tau_true.len() != self.q || self.delta_true.len() != self.q {
            return bad("effect and noise vectors must have q entries".into());
        }
        if self.delta_true.iter().any(|&d| d.is_nan() || d <= 0.0) {
            return bad("noise variances must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho_norm2) {
            return bad(format!("squared confounding norm {} outside [0, 1)", self.rho_norm2));
        }
        if !(0.0..=1.0).contains(&self.mediator_mix) {
            return bad(format!("mediator mix {} outside [0, 1]", self.mediator_mix));
        }
        if let Some(rho) = &self.rho {
            if rho.len() != self.m - self.mediator_columns() {
                return bad("rho must have one entry per pre-treatment confounder".into());
            }
            if rho.norm_squared() >= 1.0 {
                return bad("rho must have squared norm below one".into());
            }
        }
        Ok(())
    }

    /// Number of latent columns rerouted as treatment-caused.
    pub fn mediator_columns(&self) -> usize {
        (self.mediator_mix * self.m as f64).round() as usize
    }
}

/// Loadings for the reference design, or a smooth generic pattern for other shapes.
///
/// For q = 10, m = 2: rows 1-3 are collinear, rows 4-6 are orthogonal to row 1,
/// rows 7-9 have a positive and row 10 a negative inner product with row 1.
pub fn default_gamma(q: usize, m: usize) -> DMatrix<f64> {
    if q == 10 && m == 2 {
        return DMatrix::from_row_slice(
            10,
            2,
            &[
                1.0, 0.0, //
                0.6, 0.0, //
                0.8, 0.0, //
                0.0, 1.0, //
                0.0, 0.7, //
                0.0, -0.5, //
                0.5, 0.5, //
                0.7, -0.3, //
                0.3, 0.8, //
                -0.6, 0.4,
            ],
        );
    }
    DMatrix::from_fn(q, m, |j, k| {
        0.8 * (std::f64::consts::PI * (j as f64 + 0.5) * (k as f64 + 1.0) / q as f64).cos()
    })
}

#[derive(Debug, Clone)]
pub struct SimTruth {
    pub dataset: Dataset,
    /// Total effect of a unit change in T (direct plus mediated).
    pub tau_true: DVector<f64>,
    pub gamma_true: DMatrix<f64>,
    /// Partial correlations with the pre-treatment confounders, zero-padded for mediator columns.
    pub rho_true: DVector<f64>,
    pub sigma2_true: f64,
    pub delta_true: DVector<f64>,
    /// Per-unit confounding bias of the NUC estimate for each outcome.
    pub bias_true: DVector<f64>,
    pub mediator_columns: usize,
}

fn covariate_effects(p: usize, q: usize) -> (DVector<f64>, DMatrix<f64>) {
    let theta = DVector::from_element(p, 0.5);
    let b = DMatrix::from_fn(p, q, |k, j| {
        let sign = if (k + j) % 2 == 0 { 1.0 } else { -1.0 };
        0.25 * (1 + (k + j) % 3) as f64 * sign
    });
    (theta, b)
}

fn normals(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draw a dataset from `cfg`; deterministic given the seed.
pub fn generate(cfg: &SimConfig) -> Result<SimTruth> {
    cfg.validate()?;
    let (n, q, m, p) = (cfg.n, cfg.q, cfg.m, cfg.p);
    let k = cfg.mediator_columns();
    let m_pre = m - k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let rho = match &cfg.rho {
        Some(r) => r.clone(),
        None if m_pre == 0 => DVector::zeros(0),
        None => {
            let g = DVector::from_fn(m_pre, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = g.norm();
            if norm == 0.0 {
                DVector::zeros(m_pre)
            } else {
                g * (cfg.rho_norm2.sqrt() / norm)
            }
        }
    };
    let r = rho.norm_squared();

    let x = normals(&mut rng, n, p);
    let u = normals(&mut rng, n, m_pre);
    let e_t = normals(&mut rng, n, 1);
    let e_y = normals(&mut rng, n, q);
    let nu = normals(&mut rng, n, k);

    let (theta, b) = covariate_effects(p, q);
    let t = DVector::from_fn(n, |i, _| {
        let mut v = (1.0 - r).sqrt() * e_t[(i, 0)];
        for c in 0..p {
            v += theta[c] * x[(i, c)];
        }
        for c in 0..m_pre {
            v += rho[c] * u[(i, c)];
        }
        v
    });

    // (I - rho rho')^{-1/2} = I + (1/sqrt(1 - r) - 1) rho rho' / r
    let whiten = if r > 0.0 {
        DMatrix::identity(m_pre, m_pre) + (&rho * rho.transpose()) * ((1.0 / (1.0 - r).sqrt() - 1.0) / r)
    } else {
        DMatrix::identity(m_pre, m_pre)
    };
    let g_pre = cfg.gamma_true.columns(0, m_pre).into_owned();
    let g_med = cfg.gamma_true.columns(m_pre, k).into_owned();
    let latent = &u * whiten.transpose() * g_pre.transpose();
    let mediators = DMatrix::from_fn(n, k, |i, c| MEDIATOR_SLOPE * t[i] + nu[(i, c)]);
    let mediated = &mediators * g_med.transpose();

    let y = DMatrix::from_fn(n, q, |i, j| {
        let mut v = cfg.tau_true[j] * t[i] + latent[(i, j)] + cfg.delta_true[j].sqrt() * e_y[(i, j)];
        if k > 0 {
            v += mediated[(i, j)];
        }
        for c in 0..p {
            v += b[(c, j)] * x[(i, c)];
        }
        v
    });

    let total = &cfg.tau_true + &g_med * DVector::from_element(k, MEDIATOR_SLOPE);
    let bias = if m_pre > 0 { &g_pre * (&rho / (1.0 - r).sqrt()) } else { DVector::zeros(q) };
    let mut rho_full = DVector::zeros(m);
    rho_full.rows_mut(0, m_pre).copy_from(&rho);

    let dataset = Dataset::new(
        y,
        t,
        x,
        (0..q).map(|j| format!("y{}", j + 1)).collect(),
        (0..p).map(|c| format!("x{}", c + 1)).collect(),
        false,
    )?;
    Ok(SimTruth {
        dataset,
        tau_true: total,
        gamma_true: cfg.gamma_true.clone(),
        rho_true: rho_full,
        sigma2_true: 1.0,
        delta_true: cfg.delta_true.clone(),
        bias_true: bias,
        mediator_columns: k,
    })
}

/// Design in which a share of the latent columns is caused by the treatment.
pub fn mediator_scenario(cfg: &SimConfig) -> Result<SimTruth> {
    if !(cfg.mediator_mix > 0.0 && cfg.mediator_mix <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "mediator scenario needs a mix in (0, 1], got {}",
            cfg.mediator_mix
        )));
    }
    generate(cfg)
}

/// Column names `y1..yq, t, x1..xp`.
pub fn write_data_csv<W: Write>(truth: &SimTruth, out: W) -> Result<()> {
    let d = &truth.dataset;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = d.outcome_names().to_vec();
    header.push("t".into());
    header.extend(d.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec: Vec<String> = (0..d.q()).map(|j| d.outcomes()[(i, j)].to_string()).collect();
        rec.push(d.treatment()[i].to_string());
        rec.extend((0..d.p()).map(|c| d.covariates()[(i, c)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Generating parameters as read back from `truth.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthTable {
    pub outcomes: Vec<String>,
    pub tau_true: Vec<f64>,
    pub bias_true: Vec<f64>,
    pub delta_true: Vec<f64>,
    /// Row-major q x m.
    pub gamma: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub sigma2_true: f64,
}

/// One row per outcome; `rho_k` and `sigma2_true` repeat on every row.
pub fn write_truth_csv<W: Write>(truth: &SimTruth, out: W) -> Result<()> {
    let m = truth.gamma_true.ncols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["outcome".to_string(), "tau_true".into(), "bias_true".into(), "delta_true".into()];
    header.extend((0..m).map(|k| format!("gamma_{}", k + 1)));
    header.extend((0..m).map(|k| format!("rho_{}", k + 1)));
    header.push("sigma2_true".into());
    w.write_record(&header)?;
    for j in 0..truth.gamma_true.nrows() {
        let mut rec = vec![
            truth.dataset.outcome_names()[j].clone(),
            truth.tau_true[j].to_string(),
            truth.bias_true[j].to_string(),
            truth.delta_true[j].to_string(),
        ];
        rec.extend((0..m).map(|k| truth.gamma_true[(j, k)].to_string()));
        rec.extend(truth.rho_true.iter().map(|v| v.to_string()));
        rec.push(truth.sigma2_true.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: Read>(input: R) -> Result<TruthTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let m = header.iter().filter(|h| h.starts_with("gamma_")).count();
    let mut t = TruthTable {
        outcomes: vec![],
        tau_true: vec![],
        bias_true: vec![],
        delta_true: vec![],
        gamma: vec![],
        rho: vec![],
        sigma2_true: f64::NAN,
    };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).unwrap_or("").parse().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: header.get(c).unwrap_or("?").to_string(),
                value: rec.get(c).unwrap_or("").to_string(),
            })
        };
        t.outcomes.push(rec.get(0).unwrap_or("").to_string());
        t.tau_true.push(num(1)?);
        t.bias_true.push(num(2)?);
        t.delta_true.push(num(3)?);
        t.gamma.push((0..m).map(|k| num(4 + k)).collect::<Result<_>>()?);
        if row == 0 {
            t.rho = (0..m).map(|k| num(4 + m + k)).collect::<Result<_>>()?;
            t.sigma2_true = num(4 + 2 * m)?;
        }
    }
    Ok(t)
}

pub fn write_truth_files(truth: &SimTruth, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_data_csv(truth, std::fs::File::create(dir.join("data.csv"))?)?;
    write_truth_csv(truth, std::fs::File::create(dir.join("truth.csv"))?)?;
    Ok(())
}

/// Brute-force checks of the closed forms. These evaluate the bias with an
/// explicit matrix square root and search over confounder directions, sharing
/// no code path with the bounds modules.
pub mod oracle {
    use nalgebra::{DMatrix, DVector, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// `|a' Gamma (I - rho rho')^{-1/2} rho| |dt| / sigma` with the inverse root from an eigendecomposition.
    pub fn bias_explicit(gamma: &DMatrix<f64>, a: &DVector<f64>, rho: &DVector<f64>, sigma: f64, dt: f64) -> f64 {
        let m = rho.len();
        let cov = DMatrix::identity(m, m) - rho * rho.transpose();
        let eig = SymmetricEigen::new(cov);
        let inv_root_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let inv_root = &eig.eigenvectors * inv_root_diag * eig.eigenvectors.transpose();
        let v = inv_root * rho;
        (a.transpose() * gamma * v)[(0, 0)].abs() * dt.abs() / sigma
    }

    /// Maximum bias over `n_samples` random confounder directions plus the direction `Gamma'a`.
    pub fn oracle_max_bias(
        gamma: &DMatrix<f64>,
        a: &DVector<f64>,
        r2: f64,
        sigma: f64,
        dt: f64,
        n_samples: usize,
        seed: u64,
    ) -> f64 {
        let m = gamma.ncols();
        if m == 0 || r2 == 0.0 {
            return 0.0;
        }
        let radius = r2.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = 0.0_f64;
        for _ in 0..n_samples {
            let g = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            if g.norm() == 0.0 {
                continue;
            }
            let rho = &g * (radius / g.norm());
            best = best.max(bias_explicit(gamma, a, &rho, sigma, dt));
        }
        let dir = gamma.transpose() * a;
        if dir.norm() > 0.0 {
            let rho = &dir * (radius / dir.norm());
            best = best.max(bias_explicit(gamma, a, &rho, sigma, dt));
        }
        best
    }

    #[derive(Debug, Clone, PartialEq)]
    pub enum OracleError {
        /// No confounder direction satisfies the constraints.
        Infeasible { residual: f64 },
        UnsupportedRank(usize),
    }

    /// Effect assumed to be fully explained by confounding, beyond the null controls.
    #[derive(Debug, Clone)]
    pub struct Nullify {
        pub a: DVector<f64>,
        /// NUC effect of `a'Y` in contrast units.
        pub effect: f64,
    }

    /// Smallest `|rho|^2` whose confounding bias equals the control effects (and nullifies
    /// `target` when given), by grid search over the affine set of feasible confounder
    /// directions. Supports feasible sets of dimension at most 3.
    ///
    /// `tau_c` holds control NUC effects in contrast units; `resolution` is the number of
    /// initial grid points per free coordinate.
    #[allow(clippy::too_many_arguments)]
    pub fn oracle_constrained_min(
        gamma: &DMatrix<f64>,
        controls: &[usize],
        tau_c: &DVector<f64>,
        target: Option<&Nullify>,
        sigma: f64,
        dt: f64,
        resolution: usize,
    ) -> Result<f64, OracleError> {
        let m = gamma.ncols();
        let mut rows: Vec<DVector<f64>> = controls.iter().map(|&j| gamma.row(j).transpose()).collect();
        let mut rhs: Vec<f64> = tau_c.iter().map(|t| sigma * t / dt).collect();
        if let Some(t) = target {
            rows.push(gamma.transpose() * &t.a);
            rhs.push(sigma * t.effect / dt);
        }
        let b = DVector::from_vec(rhs);
        if b.norm() == 0.0 {
            return Ok(0.0);
        }
        let g = DMatrix::from_fn(rows.len(), m, |i, k| rows[i][k]);
        let scale = b.norm();

        // any least-squares solution, pushed off the minimum-norm point so the search has work to do
        let free = crate::linalg::left_null_space(&g.transpose(), crate::linalg::DEFAULT_RANK_TOL);
        let k = free.ncols();
        if k > 3 {
            return Err(OracleError::UnsupportedRank(k));
        }
        let ls = g.clone().svd(true, true).solve(&b, 1e-12).map_err(|_| OracleError::Infeasible { residual: f64::NAN })?;
        let offset = DVector::from_fn(k, |i, _| 0.5 + 0.25 * i as f64) * ls.norm().max(1.0);
        let v0 = &ls + &free * &offset;
        let residual = (&g * &v0 - &b).norm();
        if residual > 1e-7 * (1.0 + scale) {
            return Err(OracleError::Infeasible { residual });
        }

        let norm2 = |z: &[f64]| (&v0 + &free * DVector::from_column_slice(z)).norm_squared();
        let s2 = if k == 0 {
            v0.norm_squared()
        } else {
            // the minimiser is no farther from v0 than |v0| itself
            let radius = v0.norm();
            let bounds = vec![(-2.0 * radius, 2.0 * radius); k];
            let cap = [0, 100_000, 1000, 100][k];
            let res = resolution.clamp(8, cap);
            let starts = grid_starts(&norm2, &bounds, res);
            let cell = vec![4.0 * radius / res as f64; k];
            norm2(&zoom(&norm2, starts, &cell))
        };
        Ok(s2 / (1.0 + s2))
    }

    /// Best few points of a uniform grid over the box.
    fn grid_starts(f: &dyn Fn(&[f64]) -> f64, bounds: &[(f64, f64)], res: usize) -> Vec<Vec<f64>> {
        let dims = bounds.len();
        let total = res.pow(dims as u32);
        let mut scored: Vec<(f64, Vec<f64>)> = (0..total)
            .map(|mut idx| {
                let p: Vec<f64> = bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        let i = idx % res;
                        idx /= res;
                        lo + (hi - lo) * (i as f64 + 0.5) / res as f64
                    })
                    .collect();
                (f(&p), p)
            })
            .collect();
        scored.sort_by(|x, y| x.0.total_cmp(&y.0));
        scored.into_iter().take(8).map(|(_, p)| p).collect()
    }

    /// Repeated local grids shrinking around the incumbent, started from each candidate.
    fn zoom(f: &dyn Fn(&[f64]) -> f64, starts: Vec<Vec<f64>>, cell: &[f64]) -> Vec<f64> {
        let dims = cell.len();
        let per_axis: usize = if dims == 1 { 41 } else { 21 };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in starts {
            let mut center = start;
            let mut half: Vec<f64> = cell.iter().map(|c| 2.0 * c).collect();
            let mut val = f(&center);
            for _ in 0..80 {
                let total = per_axis.pow(dims as u32);
                for mut idx in 0..total {
                    let p: Vec<f64> = (0..dims)
                        .map(|d| {
                            let i = idx % per_axis;
                            idx /= per_axis;
                            center[d] + half[d] * (2.0 * i as f64 / (per_axis - 1) as f64 - 1.0)
                        })
                        .collect();
                    let v = f(&p);
                    if v < val {
                        val = v;
                        center = p;
                    }
                }
                for h in half.iter_mut() {
                    *h *= 4.0 / (per_axis - 1) as f64;
                }
            }
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, center));
            }
        }
        best.expect("at least one start").1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::regression::fit_observed;

    #[test]
    fn reference_design_values() {
        let cfg = SimConfig::reference();
        assert_eq!((cfg.n, cfg.q, cfg.m), (1000, 10, 2));
        assert_eq!(cfg.rho_norm2, 0.5);
        let expected = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(cfg.tau_true.as_slice(), &expected);
    }

    #[test]
    fn default_gamma_structure() {
        let g = default_gamma(10, 2);
        let row = |j: usize| g.row(j).transpose();
        let cross = |a: &DVector<f64>, b: &DVector<f64>| a[0] * b[1] - a[1] * b[0];
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(cross(&row(i), &row(j)).abs() < 1e-12);
        }
        for j in 3..6 {
            assert!(row(0).dot(&row(j)).abs() < 1e-12);
        }
        for j in 6..9 {
            assert!(row(0).dot(&row(j)) > 0.0);
        }
        assert!(row(0).dot(&row(9)) < 0.0);
        assert_eq!(default_gamma(6, 3).shape(), (6, 3));
    }

    #[test]
    fn deterministic_under_seed() {
        let mut cfg = SimConfig::reference();
        cfg.n = 200;
        cfg.seed = 17;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset.outcomes(), b.dataset.outcomes());
        assert_eq!(a.dataset.treatment(), b.dataset.treatment());
        assert_eq!(a.rho_true, b.rho_true);
        cfg.seed = 18;
        let c = generate(&cfg).unwrap();
        assert_ne!(a.dataset.treatment(), c.dataset.treatment());
    }

    #[test]
    fn bias_matches_parameters() {
        let mut cfg = SimConfig::reference();
        cfg.n = 50;
        cfg.seed = 3;
        let t = generate(&cfg).unwrap();
        assert!((t.rho_true.norm_squared() - 0.5).abs() < 1e-12);
        for j in 0..10 {
            let a = DVector::from_fn(10, |i, _| if i == j { 1.0 } else { 0.0 });
            let oracle = oracle::bias_explicit(&t.gamma_true, &a, &t.rho_true, 1.0, 1.0);
            assert!((t.bias_true[j].abs() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn parameterisation_fidelity_large_n() {
        let mut cfg = SimConfig::with_shape(100_000, 10, 2, 1);
        cfg.gamma_true = default_gamma(10, 2);
        cfg.tau_true = SimConfig::reference().tau_true;
        cfg.seed = 21;
        let t = generate(&cfg).unwrap();
        let fit = fit_observed(&t.dataset).unwrap();
        assert!((fit.sigma2 - 1.0).abs() < 0.02);
        // NUC estimates equal total effect plus bias
        for j in 0..10 {
            assert!((fit.tau_check[j] - t.tau_true[j] - t.bias_true[j]).abs() < 0.03);
        }
        // residual covariance follows Gamma Gamma' + Delta
        let s = linalg::sample_covariance(&fit.outcome_residuals);
        let mut pop = &t.gamma_true * t.gamma_true.transpose();
        for j in 0..10 {
            pop[(j, j)] += t.delta_true[j];
        }
        assert!((s - &pop).norm() / pop.norm() < 0.05);
    }

    #[test]
    fn no_confounding_means_uncorrelated_scores() {
        let mut cfg = SimConfig::reference();
        cfg.rho_norm2 = 0.0;
        cfg.seed = 5;
        let t = generate(&cfg).unwrap();
        assert!(t.bias_true.iter().all(|&b| b == 0.0));
        let fit = fit_observed(&t.dataset).unwrap();
        let n = t.dataset.n() as f64;
        for j in 0..10 {
            let bias = fit.tau_check[j] - t.tau_true[j];
            // |corr(T, residual_j)| ~ bias * sd(T) / sd(residual_j)
            let sd = (t.gamma_true.row(j).norm_squared() + 1.0).sqrt();
            assert!((bias / sd).abs() < 4.0 / n.sqrt());
        }
    }

    #[test]
    fn mediator_scenarios() {
        let mut cfg = SimConfig::reference();
        cfg.n = 100;
        cfg.seed = 9;
        let plain = generate(&cfg).unwrap();
        cfg.mediator_mix = 1.0;
        let all = mediator_scenario(&cfg).unwrap();
        assert!(all.bias_true.iter().all(|&b| b == 0.0));
        assert_eq!(all.mediator_columns, 2);
        cfg.mediator_mix = 0.5;
        let half = mediator_scenario(&cfg).unwrap();
        assert_eq!(half.mediator_columns, 1);
        let bound = (0.5_f64 / 0.5).sqrt();
        for j in 0..10 {
            assert!(half.bias_true[j].abs() <= bound * half.gamma_true.row(j).norm() + 1e-12);
            assert!((half.tau_true[j] - cfg.tau_true[j] - 0.5 * half.gamma_true[(j, 1)]).abs() < 1e-15);
        }
        cfg.mediator_mix = 0.0;
        assert!(mediator_scenario(&cfg).is_err());
        let zero = generate(&cfg).unwrap();
        assert_eq!(zero.dataset.outcomes(), plain.dataset.outcomes());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SimConfig::reference();
        cfg.rho_norm2 = 1.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = SimConfig::reference();
        cfg.gamma_true = DMatrix::zeros(3, 2);
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn truth_csv_round_trip() {
        let mut cfg = SimConfig::with_shape(30, 3, 2, 1);
        cfg.tau_true = DVector::from_vec(vec![0.0, 1.0, -0.5]);
        cfg.seed = 2;
        let t = generate(&cfg).unwrap();
        let mut buf = Vec::new();
        write_truth_csv(&t, &mut buf).unwrap();
        let back = read_truth_csv(buf.as_slice()).unwrap();
        assert_eq!(back.tau_true, t.tau_true.as_slice());
        assert_eq!(back.bias_true, t.bias_true.as_slice());
        assert_eq!(back.rho, t.rho_true.as_slice());
        assert_eq!(back.gamma[2], vec![t.gamma_true[(2, 0)], t.gamma_true[(2, 1)]]);
        let mut data = Vec::new();
        write_data_csv(&t, &mut data).unwrap();
        let text = String::from_utf8(data).unwrap();
        assert!(text.starts_with("y1,y2,y3,t,x1\n"));
        assert_eq!(text.lines().count(), 31);
    }

    mod oracles {
        use super::super::oracle::*;
        use nalgebra::{DMatrix, DVector};

        #[test]
        fn max_bias_trivial_cases() {
            let g = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
            let a = DVector::from_vec(vec![0.0, 1.0]);
            assert_eq!(oracle_max_bias(&g, &a, 0.0, 1.0, 1.0, 100, 1), 0.0);
            assert!((oracle_max_bias(&g, &a, 0.5, 1.0, 1.0, 100, 1) - 2.0).abs() < 1e-12);
            let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
            let null = DVector::from_vec(vec![1.0, -1.0]);
            assert_eq!(oracle_max_bias(&g, &null, 0.7, 1.0, 1.0, 100, 1), 0.0);
        }

        #[test]
        fn constrained_min_scalar_and_zero() {
            let g = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
            let r = oracle_constrained_min(&g, &[0], &DVector::from_element(1, 1.0), None, 1.0, 1.0, 100).unwrap();
            assert!((r - 0.5).abs() < 1e-10);
            let r = oracle_constrained_min(&g, &[0], &DVector::zeros(1), None, 1.0, 1.0, 100).unwrap();
            assert_eq!(r, 0.0);
        }

        #[test]
        fn constrained_min_two_dims() {
            let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.3, 0.7, -0.2, 0.5]);
            // controls only: minimum-norm solution of (1, 0) v = 0.8
            let r = oracle_constrained_min(&g, &[0], &DVector::from_element(1, 0.8), None, 1.0, 1.0, 2000).unwrap();
            assert!((r - 0.64 / 1.64).abs() < 1e-6);
            // with a nullified contrast the system is square: v = G^{-1} b
            let target = Nullify { a: DVector::from_vec(vec![0.0, 1.0, 0.0]), effect: 0.9 };
            let r = oracle_constrained_min(&g, &[0], &DVector::from_element(1, 0.8), Some(&target), 1.0, 1.0, 2000).unwrap();
            let v2 = (0.9 - 0.3 * 0.8) / 0.7;
            let s2 = 0.64 + v2 * v2;
            assert!((r - s2 / (1.0 + s2)).abs() < 1e-6);
        }

        #[test]
        fn constrained_min_three_dims() {
            let g = DMatrix::from_row_slice(4, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.3, 0.4, -0.5, 1.0, 0.3, 0.3, 0.3]);
            let tau = DVector::from_vec(vec![0.5, -0.4]);
            let r = oracle_constrained_min(&g, &[0, 1], &tau, None, 1.0, 1.0, 60).unwrap();
            let gc = g.rows(0, 2).into_owned();
            let v = gc.clone().pseudo_inverse(1e-12).unwrap() * &tau;
            let s2 = v.norm_squared();
            assert!((r - s2 / (1.0 + s2)).abs() < 1e-6, "{r} vs {}", s2 / (1.0 + s2));
        }

        #[test]
        fn rowspace_target_is_infeasible() {
            // outcome 2 loads exactly like the control but has a different effect
            let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
            let target = Nullify { a: DVector::from_vec(vec![0.0, 1.0]), effect: 0.3 };
            let res = oracle_constrained_min(&g, &[0], &DVector::from_element(1, 0.5), Some(&target), 1.0, 1.0, 500);
            assert!(matches!(res, Err(OracleError::Infeasible { .. })));
        }
    }
}
