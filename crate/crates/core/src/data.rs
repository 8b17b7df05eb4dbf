//! Domain types and CSV ingestion.
//!
//! A [`Dataset`] holds the outcome matrix `Y` (n x q), the treatment vector `T`
//! and the covariate matrix `X` (n x p). The intercept is never part of `X`;
//! the regression stage appends it.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    outcomes: DMatrix<f64>,
    treatment: DVector<f64>,
    covariates: DMatrix<f64>,
    outcome_names: Vec<String>,
    covariate_names: Vec<String>,
    binary_treatment: bool,
}

impl Dataset {
    pub fn new(
        outcomes: DMatrix<f64>,
        treatment: DVector<f64>,
        covariates: DMatrix<f64>,
        outcome_names: Vec<String>,
        covariate_names: Vec<String>,
        binary_treatment: bool,
    ) -> Result<Self> {
        let n = outcomes.nrows();
        let q = outcomes.ncols();
        let p = covariates.ncols();
        if q == 0 {
            return Err(Error::InvalidInput("at least one outcome is required".into()));
        }
        if treatment.len() != n || covariates.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "row counts disagree: outcomes {n}, treatment {}, covariates {}",
                treatment.len(),
                covariates.nrows()
            )));
        }
        if outcome_names.len() != q || covariate_names.len() != p {
            return Err(Error::InvalidInput("column labels do not match matrix shapes".into()));
        }
        if n < p + 3 {
            return Err(Error::TooFewRows {
                rows: n,
                required: p + 3,
            });
        }
        let finite = outcomes.iter().chain(treatment.iter()).chain(covariates.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in dataset".into()));
        }
        if binary_treatment {
            if let Some((row, &value)) = treatment
                .iter()
                .enumerate()
                .find(|(_, &t)| t != 0.0 && t != 1.0)
            {
                return Err(Error::NonBinaryTreatment { row, value });
            }
        }
        reject_duplicate_outcomes(&outcomes)?;
        Ok(Self {
            outcomes,
            treatment,
            covariates,
            outcome_names,
            covariate_names,
            binary_treatment,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn q(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treatment(&self) -> &DVector<f64> {
        &self.treatment
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn binary_treatment(&self) -> bool {
        self.binary_treatment
    }

    /// New dataset made of the given rows (repetitions allowed), in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let y = self.outcomes.select_rows(rows.iter());
        let t = self.treatment.select_rows(rows.iter());
        let x = self.covariates.select_rows(rows.iter());
        Dataset::new(
            y,
            t,
            x,
            self.outcome_names.clone(),
            self.covariate_names.clone(),
            self.binary_treatment,
        )
    }

    /// Same rows with the listed covariate columns removed.
    pub fn drop_covariates(&self, drop: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.p()).filter(|j| !drop.contains(j)).collect();
        let x = self.covariates.select_columns(keep.iter());
        let names = keep.iter().map(|&j| self.covariate_names[j].clone()).collect();
        Ok(Self {
            covariates: x,
            covariate_names: names,
            ..self.clone()
        })
    }

    /// Copy with each outcome column multiplied by `factors[j]`.
    pub fn scale_outcomes(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.q() {
            return Err(Error::InvalidInput("one scale factor per outcome required".into()));
        }
        let mut y = self.outcomes.clone();
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col *= factors[j];
        }
        Ok(Self {
            outcomes: y,
            ..self.clone()
        })
    }

    /// Copy with a replaced treatment vector (same validation as construction).
    pub fn with_treatment(&self, treatment: DVector<f64>) -> Result<Self> {
        Dataset::new(
            self.outcomes.clone(),
            treatment,
            self.covariates.clone(),
            self.outcome_names.clone(),
            self.covariate_names.clone(),
            self.binary_treatment,
        )
    }
}

fn reject_duplicate_outcomes(y: &DMatrix<f64>) -> Result<()> {
    let q = y.ncols();
    let n = y.nrows() as f64;
    let centered: Vec<DVector<f64>> = y
        .column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            c.map(|v| v - mean)
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.norm()).collect();
    for i in 0..q {
        for j in (i + 1)..q {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let corr = centered[i].dot(&centered[j]) / (norms[i] * norms[j]);
            if corr.abs() >= 1.0 - 1e-12 {
                return Err(Error::DuplicateOutcome(i, j));
            }
        }
    }
    Ok(())
}

/// Column roles used when reading a CSV file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Schema {
    pub outcomes: Vec<String>,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub binary_treatment: bool,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    /// Rows dropped because a selected cell was empty.
    pub dropped_rows: usize,
}

/// Read a headered CSV file. Rows with an empty cell in any selected column are dropped.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<LoadedDataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    read_dataset(reader, schema)
}

/// Same as [`load_dataset`] for an in-memory CSV document.
pub fn parse_dataset(text: &str, schema: &Schema) -> Result<LoadedDataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    read_dataset(reader, schema)
}

fn read_dataset<R: std::io::Read>(mut reader: csv::Reader<R>, schema: &Schema) -> Result<LoadedDataset> {
    if schema.outcomes.is_empty() {
        return Err(Error::InvalidInput("schema names no outcome columns".into()));
    }
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let mut selected: Vec<String> = schema.outcomes.clone();
    selected.push(schema.treatment.clone());
    selected.extend(schema.covariates.iter().cloned());
    let mut seen = BTreeSet::new();
    for name in &selected {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidInput(format!("column {name} assigned more than one role")));
        }
    }
    let idx: Vec<usize> = selected.iter().map(|s| find(s)).collect::<Result<_>>()?;

    let width = idx.len();
    let mut values: Vec<f64> = Vec::new();
    let mut kept = 0;
    let mut dropped = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let mut parsed = Vec::with_capacity(width);
        let mut missing = false;
        for (k, &col) in idx.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            if cell.is_empty() {
                missing = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: selected[k].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row: row + 1,
                    column: selected[k].clone(),
                    value: cell.to_string(),
                });
            }
            parsed.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        values.extend(parsed);
        kept += 1;
    }
    let q = schema.outcomes.len();
    let p = schema.covariates.len();
    if kept < p + 3 {
        return Err(Error::TooFewRows {
            rows: kept,
            required: p + 3,
        });
    }
    let table = DMatrix::from_row_slice(kept, width, &values);
    let outcomes = table.columns(0, q).into_owned();
    let treatment = table.column(q).into_owned();
    let covariates = table.columns(q + 1, p).into_owned();
    let dataset = Dataset::new(
        outcomes,
        treatment,
        covariates,
        schema.outcomes.clone(),
        schema.covariates.clone(),
        schema.binary_treatment,
    )?;
    Ok(LoadedDataset {
        dataset,
        dropped_rows: dropped,
    })
}

/// Rescale every outcome to unit sample variance. Returns the original standard deviations.
pub fn standardize_outcomes(d: &Dataset) -> Result<(Dataset, DVector<f64>)> {
    let n = d.n() as f64;
    let mut scale = DVector::zeros(d.q());
    for (j, col) in d.outcomes().column_iter().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 {
            return Err(Error::ZeroVariance(j));
        }
        scale[j] = var.sqrt();
    }
    let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
    Ok((d.scale_outcomes(&inv)?, scale))
}

/// The two treatment levels compared by an effect, `t1` versus `t2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentContrast {
    t1: f64,
    t2: f64,
}

impl TreatmentContrast {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !t1.is_finite() || !t2.is_finite() || t1 == t2 {
            return Err(Error::InvalidInput(format!("treatment levels must differ, got {t1} and {t2}")));
        }
        Ok(Self { t1, t2 })
    }

    /// Unit change, `1` versus `0`.
    pub fn unit() -> Self {
        Self { t1: 1.0, t2: 0.0 }
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn t2(&self) -> f64 {
        self.t2
    }

    /// `t1 - t2`.
    pub fn delta(&self) -> f64 {
        self.t1 - self.t2
    }
}

/// Linear combination `a'Y` of the outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    weights: DVector<f64>,
    label: String,
}

impl Contrast {
    pub fn new(weights: DVector<f64>, label: impl Into<String>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) || weights.norm() <= 0.0 {
            return Err(Error::InvalidInput("contrast weights must be finite and nonzero".into()));
        }
        Ok(Self {
            weights,
            label: label.into(),
        })
    }

    /// `e_j`.
    pub fn canonical(q: usize, j: usize, label: impl Into<String>) -> Self {
        let mut w = DVector::zeros(q);
        w[j] = 1.0;
        Self {
            weights: w,
            label: label.into(),
        }
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityQuery {
    pub contrast: Contrast,
    pub treatment_contrast: TreatmentContrast,
    /// Budget `R^2_{T~U|X}`.
    pub r2_tu: f64,
    /// Zero-based indices of null-control outcomes, sorted and distinct.
    pub null_controls: Vec<usize>,
}

impl SensitivityQuery {
    pub fn new(
        contrast: Contrast,
        treatment_contrast: TreatmentContrast,
        r2_tu: f64,
        null_controls: Vec<usize>,
    ) -> Result<Self> {
        check_budget(r2_tu)?;
        let q = contrast.len();
        let controls = validate_controls(&null_controls, q)?;
        Ok(Self {
            contrast,
            treatment_contrast,
            r2_tu,
            null_controls: controls,
        })
    }
}

pub(crate) fn check_budget(r2: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r2) || !r2.is_finite() {
        return Err(Error::BudgetOutOfRange(r2));
    }
    Ok(())
}

/// Sorted, deduplicated control indices; rejects out-of-range or all-outcome sets.
pub(crate) fn validate_controls(controls: &[usize], q: usize) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = controls.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&j| j >= q) {
        return Err(Error::InvalidInput(format!("null control index {bad} out of range for {q} outcomes")));
    }
    if set.len() >= q {
        return Err(Error::InvalidInput("null controls must leave at least one outcome".into()));
    }
    Ok(set.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            outcomes: vec!["y1".into(), "y2".into()],
            treatment: "t".into(),
            covariates: vec!["x".into()],
            binary_treatment: false,
        }
    }

    const CSV4: &str = "y1,y2,t,x\n1.0,2.0,0,0.5\n2.0,1.5,1,0.1\n0.5,3.0,0,-0.4\n3.0,0.2,1,1.2\n";

    #[test]
    fn parses_four_rows() {
        let loaded = parse_dataset(CSV4, &schema()).unwrap();
        let d = loaded.dataset;
        assert_eq!((d.n(), d.q(), d.p()), (4, 2, 1));
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(d.outcomes()[(3, 0)], 3.0);
        assert_eq!(d.treatment()[1], 1.0);
    }

    #[test]
    fn drops_row_with_empty_cell() {
        let text = "y1,y2,t,x\n1.0,2.0,0,0.5\n2.0,,1,0.1\n0.5,3.0,0,-0.4\n3.0,0.2,1,1.2\n1.1,0.9,1,0.3\n";
        let loaded = parse_dataset(text, &schema()).unwrap();
        assert_eq!(loaded.dataset.n(), 4);
        assert_eq!(loaded.dropped_rows, 1);
    }

    #[test]
    fn missing_column_is_reported() {
        let mut s = schema();
        s.covariates = vec!["z".into()];
        match parse_dataset(CSV4, &s) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_rejected() {
        let text = "y1,y2,t,x\n1.0,abc,0,0.5\n2.0,1.0,1,0.1\n0.5,3.0,0,-0.4\n3.0,0.2,1,1.2\n";
        assert!(matches!(parse_dataset(text, &schema()), Err(Error::NonNumeric { .. })));
    }

    #[test]
    fn too_few_complete_rows() {
        let text = "y1,y2,t,x\n1.0,,0,0.5\n2.0,1.0,1,0.1\n0.5,3.0,0,-0.4\n";
        assert!(matches!(
            parse_dataset(text, &schema()),
            Err(Error::TooFewRows { rows: 2, required: 4 })
        ));
    }

    #[test]
    fn binary_flag_checks_values() {
        let mut s = schema();
        s.binary_treatment = true;
        assert!(parse_dataset(CSV4, &s).is_ok());
        let text = "y1,y2,t,x\n1.0,2.0,0,0.5\n2.0,1.5,2,0.1\n0.5,3.0,0,-0.4\n3.0,0.2,1,1.2\n";
        assert!(matches!(parse_dataset(text, &s), Err(Error::NonBinaryTreatment { .. })));
    }

    #[test]
    fn duplicate_outcomes_rejected() {
        let text = "y1,y2,t,x\n1.0,2.0,0,0.5\n2.0,4.0,1,0.1\n0.5,1.0,0,-0.4\n3.0,6.0,1,1.2\n";
        assert!(matches!(parse_dataset(text, &schema()), Err(Error::DuplicateOutcome(0, 1))));
    }

    #[test]
    fn standardize_scale_two() {
        // sample sd exactly 2
        let col = [1.0, -1.0, 1.0, -1.0].map(|v: f64| v * 2.0 * (3.0_f64 / 4.0).sqrt());
        let d = Dataset::new(
            DMatrix::from_column_slice(4, 1, &col),
            DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]),
            DMatrix::zeros(4, 0),
            vec!["a".into()],
            vec![],
            false,
        )
        .unwrap();
        let (s, scale) = standardize_outcomes(&d).unwrap();
        assert!((scale[0] - 2.0).abs() < 1e-12);
        for (i, c) in col.iter().enumerate() {
            assert!((s.outcomes()[(i, 0)] - c / 2.0).abs() < 1e-12);
        }
        // already unit variance: unchanged
        let (s2, scale2) = standardize_outcomes(&s).unwrap();
        assert!((scale2[0] - 1.0).abs() < 1e-12);
        assert!((s2.outcomes() - s.outcomes()).amax() < 1e-12);
    }

    #[test]
    fn constant_outcome_fails_standardization() {
        let d = Dataset::new(
            DMatrix::from_column_slice(4, 2, &[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 3.0, 2.0]),
            DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]),
            DMatrix::zeros(4, 0),
            vec!["a".into(), "b".into()],
            vec![],
            false,
        )
        .unwrap();
        assert!(matches!(standardize_outcomes(&d), Err(Error::ZeroVariance(0))));
    }

    #[test]
    fn query_validation() {
        let a = Contrast::canonical(3, 0, "y1");
        assert!(SensitivityQuery::new(a.clone(), TreatmentContrast::unit(), 1.0, vec![]).is_err());
        assert!(SensitivityQuery::new(a.clone(), TreatmentContrast::unit(), 0.2, vec![0, 1, 2]).is_err());
        assert!(SensitivityQuery::new(a.clone(), TreatmentContrast::unit(), 0.2, vec![5]).is_err());
        let q = SensitivityQuery::new(a, TreatmentContrast::unit(), 0.2, vec![2, 0, 2]).unwrap();
        assert_eq!(q.null_controls, vec![0, 2]);
        assert!(TreatmentContrast::new(1.0, 1.0).is_err());
        assert!(Contrast::new(DVector::zeros(3), "zero").is_err());
    }
}
