//! Pairs bootstrap over rows for interval endpoints and robustness values.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::quantile;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct BootstrapContext {
    pub b: usize,
    pub seed: u64,
    pub level: f64,
}

impl BootstrapContext {
    pub fn new(b: usize, seed: u64, level: f64) -> Result<Self> {
        if b == 0 {
            return Err(Error::InvalidInput("bootstrap needs at least one replicate".into()));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidInput(format!("level {level} outside (0, 1)")));
        }
        Ok(Self { b, seed, level })
    }

    fn tail(&self) -> f64 {
        (1.0 - self.level) / 2.0
    }
}

/// A named functional computed by the analysis pipeline on one (re)sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    /// Region endpoints; summarised by the outer envelope.
    Region { lower: f64, upper: f64 },
    /// Robustness value; summarised conservatively by its lower percentile.
    Robustness(f64),
    /// Any other scalar; summarised by a percentile interval.
    Value(f64),
}

pub type Statistics = BTreeMap<String, Statistic>;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BootstrapResult {
    Region { lower: f64, upper: f64, replicates: usize },
    Robustness { conservative: f64, lower: f64, upper: f64, replicates: usize },
    Value { lower: f64, upper: f64, replicates: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub b: usize,
    pub seed: u64,
    pub level: f64,
    /// Replicates that still failed after all retries.
    pub failed_replicates: usize,
    pub retries: usize,
    pub statistics: BTreeMap<String, BootstrapResult>,
}

/// Seed for replicate `rep`, attempt `attempt`; a splitmix64 finaliser over the mixed inputs.
fn derived_seed(seed: u64, rep: usize, attempt: usize) -> u64 {
    let mut z = seed
        ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row indices of one resample.
pub fn resample_rows(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Refit `pipeline` on `ctx.b` row resamples and summarise each statistic.
pub fn bootstrap_analysis<F>(d: &Dataset, pipeline: F, ctx: &BootstrapContext) -> Result<BootstrapSummary>
where
    F: Fn(&Dataset) -> Result<Statistics> + Sync,
{
    let n = d.n();
    let outcomes: Vec<(Option<Statistics>, usize)> = (0..ctx.b)
        .into_par_iter()
        .map(|rep| {
            for attempt in 0..MAX_RETRIES {
                let rows = resample_rows(n, derived_seed(ctx.seed, rep, attempt));
                let stats = d.select_rows(&rows).and_then(|sample| pipeline(&sample));
                if let Ok(s) = stats {
                    return (Some(s), attempt);
                }
            }
            (None, MAX_RETRIES)
        })
        .collect();

    let failed_replicates = outcomes.iter().filter(|(s, _)| s.is_none()).count();
    let retries = outcomes.iter().map(|(_, a)| *a).sum();
    let mut collected: BTreeMap<String, Vec<Statistic>> = BTreeMap::new();
    for (stats, _) in outcomes.into_iter() {
        for (name, value) in stats.into_iter().flatten() {
            collected.entry(name).or_default().push(value);
        }
    }
    let tail = ctx.tail();
    let mut statistics = BTreeMap::new();
    for (name, values) in collected {
        if let Some(summary) = summarise(&values, tail) {
            statistics.insert(name, summary);
        }
    }
    Ok(BootstrapSummary {
        b: ctx.b,
        seed: ctx.seed,
        level: ctx.level,
        failed_replicates,
        retries,
        statistics,
    })
}

fn summarise(values: &[Statistic], tail: f64) -> Option<BootstrapResult> {
    let first = values.first()?;
    let replicates = values.len();
    match first {
        Statistic::Region { .. } => {
            let (mut lows, mut highs) = (Vec::new(), Vec::new());
            for v in values {
                if let Statistic::Region { lower, upper } = v {
                    lows.push(*lower);
                    highs.push(*upper);
                }
            }
            Some(BootstrapResult::Region {
                lower: quantile(lows, tail),
                upper: quantile(highs, 1.0 - tail),
                replicates,
            })
        }
        Statistic::Robustness(_) | Statistic::Value(_) => {
            let xs: Vec<f64> = values
                .iter()
                .filter_map(|v| match v {
                    Statistic::Robustness(x) | Statistic::Value(x) => Some(*x),
                    Statistic::Region { .. } => None,
                })
                .collect();
            let lower = quantile(xs.clone(), tail);
            let upper = quantile(xs, 1.0 - tail);
            Some(match first {
                Statistic::Robustness(_) => BootstrapResult::Robustness { conservative: lower, lower, upper, replicates },
                _ => BootstrapResult::Value { lower, upper, replicates },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::fit_observed;
    use crate::simulation::{generate, SimConfig};

    fn small_data() -> Dataset {
        let mut cfg = SimConfig::reference();
        cfg.n = 150;
        cfg.seed = 4;
        generate(&cfg).unwrap().dataset
    }

    fn pipeline(d: &Dataset) -> Result<Statistics> {
        let fit = fit_observed(d)?;
        let mut s = Statistics::new();
        s.insert("tau1".into(), Statistic::Value(fit.tau_check[0]));
        s.insert(
            "box".into(),
            Statistic::Region { lower: fit.tau_check[2] - 1.0, upper: fit.tau_check[2] + 1.0 },
        );
        s.insert("rv".into(), Statistic::Robustness(fit.sigma2.min(0.99)));
        Ok(s)
    }

    #[test]
    fn single_replicate_is_degenerate() {
        let d = small_data();
        let ctx = BootstrapContext::new(1, 3, 0.95).unwrap();
        let sum = bootstrap_analysis(&d, pipeline, &ctx).unwrap();
        match sum.statistics["tau1"] {
            BootstrapResult::Value { lower, upper, replicates } => {
                assert_eq!(lower, upper);
                assert_eq!(replicates, 1);
            }
            ref other => panic!("unexpected {other:?}"),
        }
        let rows = resample_rows(d.n(), derived_seed(3, 0, 0));
        let direct = pipeline(&d.select_rows(&rows).unwrap()).unwrap();
        assert_eq!(direct["tau1"], Statistic::Value(match sum.statistics["tau1"] {
            BootstrapResult::Value { lower, .. } => lower,
            _ => unreachable!(),
        }));
    }

    #[test]
    fn reruns_are_identical() {
        let d = small_data();
        let ctx = BootstrapContext::new(40, 11, 0.9).unwrap();
        let a = bootstrap_analysis(&d, pipeline, &ctx).unwrap();
        let b = bootstrap_analysis(&d, pipeline, &ctx).unwrap();
        assert_eq!(a.statistics, b.statistics);
    }

    #[test]
    fn envelope_widens_with_level() {
        let d = small_data();
        let narrow = bootstrap_analysis(&d, pipeline, &BootstrapContext::new(60, 2, 0.5).unwrap()).unwrap();
        let wide = bootstrap_analysis(&d, pipeline, &BootstrapContext::new(60, 2, 0.95).unwrap()).unwrap();
        for name in ["tau1", "box", "rv"] {
            let bounds = |r: &BootstrapResult| match *r {
                BootstrapResult::Region { lower, upper, .. }
                | BootstrapResult::Value { lower, upper, .. }
                | BootstrapResult::Robustness { lower, upper, .. } => (lower, upper),
            };
            let (l1, u1) = bounds(&narrow.statistics[name]);
            let (l2, u2) = bounds(&wide.statistics[name]);
            assert!(l2 <= l1 && u1 <= u2, "{name}");
        }
        if let BootstrapResult::Robustness { conservative, lower, .. } = wide.statistics["rv"] {
            assert_eq!(conservative, lower);
        }
    }

    #[test]
    fn summaries_ignore_replicate_order() {
        let vals = vec![Statistic::Value(3.0), Statistic::Value(1.0), Statistic::Value(2.0), Statistic::Value(5.0)];
        let mut rev = vals.clone();
        rev.reverse();
        assert_eq!(summarise(&vals, 0.1), summarise(&rev, 0.1));
    }

    #[test]
    fn failing_replicates_are_counted() {
        let d = small_data();
        let ctx = BootstrapContext::new(5, 1, 0.95).unwrap();
        let fail = |_: &Dataset| -> Result<Statistics> { Err(Error::Numeric("always".into())) };
        let sum = bootstrap_analysis(&d, fail, &ctx).unwrap();
        assert_eq!(sum.failed_replicates, 5);
        assert!(sum.statistics.is_empty());
        assert!(BootstrapContext::new(0, 1, 0.95).is_err());
    }
}
