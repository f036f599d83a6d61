//! Data quality scoring over five issue classes with equal weight.
//!
//! Estimators:
//! - outliers: fraction of rows with any continuous predictor outside the
//!   Tukey fences `[Q1 - k*IQR, Q3 + k*IQR]`, quartiles taken from the
//!   original training rows;
//! - duplicates: `1 - distinct / total` over full rows;
//! - correlation: fraction of predictor pairs whose association exceeds the
//!   threshold (Pearson |r|, Cramér's V, or the correlation ratio for mixed
//!   pairs);
//! - skew: fraction of continuous predictors with |Fisher-Pearson skewness|
//!   above the threshold;
//! - imbalance: `1 - minority / majority` over the target classes.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    quantile_sorted, Provenance, Row, RowId, Schema, TabularDataset, VariableKind,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("dataset has no rows")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub outlier_iqr_multiplier: f64,
    pub correlation_threshold: f64,
    pub skew_threshold: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            outlier_iqr_multiplier: 1.5,
            correlation_threshold: 0.8,
            skew_threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedPair {
    pub a: String,
    pub b: String,
    pub association: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub outlier_severity: f64,
    pub duplicate_severity: f64,
    pub correlation_severity: f64,
    pub skew_severity: f64,
    pub imbalance_severity: f64,
    /// `1 - mean(severities)`.
    pub overall: f64,
    pub flagged_pairs: Vec<CorrelatedPair>,
    pub outlier_rows: Vec<RowId>,
    pub duplicate_rows: Vec<RowId>,
}

impl QualityReport {
    pub fn severities(&self) -> [f64; 5] {
        [
            self.outlier_severity,
            self.duplicate_severity,
            self.correlation_severity,
            self.skew_severity,
            self.imbalance_severity,
        ]
    }

    /// Severities and overall score as whole percentages, for gauges.
    pub fn percentages(&self) -> [(&'static str, f64); 6] {
        let pct = |x: f64| (x * 1000.0).round() / 10.0;
        [
            ("outliers", pct(self.outlier_severity)),
            ("duplicates", pct(self.duplicate_severity)),
            ("correlated_features", pct(self.correlation_severity)),
            ("skewed_variables", pct(self.skew_severity)),
            ("class_imbalance", pct(self.imbalance_severity)),
            ("overall", pct(self.overall)),
        ]
    }
}

/// Tukey fences per schema column; `None` for non-continuous columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fences(pub Vec<Option<(f64, f64)>>);

impl Fences {
    pub fn from_rows(schema: &Schema, rows: &[&Row], k: f64) -> Self {
        Fences(
            (0..schema.len())
                .map(|v| {
                    if v == schema.target_index()
                        || schema.variable(v).kind != VariableKind::Continuous
                    {
                        return None;
                    }
                    let mut vals: Vec<f64> = rows.iter().map(|r| r.cells[v].as_f64()).collect();
                    if vals.is_empty() {
                        return None;
                    }
                    vals.sort_by(f64::total_cmp);
                    let q1 = quantile_sorted(&vals, 0.25);
                    let q3 = quantile_sorted(&vals, 0.75);
                    let iqr = q3 - q1;
                    Some((q1 - k * iqr, q3 + k * iqr))
                })
                .collect(),
        )
    }

    /// Fences from the dataset's original training rows (all active rows when
    /// none are original).
    pub fn reference(dataset: &TabularDataset, k: f64) -> Self {
        let originals: Vec<&Row> = dataset
            .active_rows()
            .filter(|r| r.provenance == Provenance::Original)
            .collect();
        if originals.is_empty() {
            let all: Vec<&Row> = dataset.active_rows().collect();
            Fences::from_rows(dataset.schema(), &all, k)
        } else {
            Fences::from_rows(dataset.schema(), &originals, k)
        }
    }
}

/// Quality of the dataset's training rows (every row when unsplit).
pub fn quality_report(
    dataset: &TabularDataset,
    config: &QualityConfig,
) -> Result<QualityReport, QualityError> {
    let fences = Fences::reference(dataset, config.outlier_iqr_multiplier);
    let rows: Vec<&Row> = dataset.active_rows().collect();
    quality_of_rows(dataset.schema(), &rows, &fences, config)
}

/// Quality of an arbitrary row set against fixed fences.
pub fn quality_of_rows(
    schema: &Schema,
    rows: &[&Row],
    fences: &Fences,
    config: &QualityConfig,
) -> Result<QualityReport, QualityError> {
    if rows.is_empty() {
        return Err(QualityError::EmptyDataset);
    }
    let n = rows.len() as f64;

    let outlier_rows: Vec<RowId> = rows
        .iter()
        .filter(|r| {
            r.cells.iter().zip(&fences.0).any(|(c, f)| match f {
                Some((lo, hi)) => {
                    let x = c.as_f64();
                    x < *lo || x > *hi
                }
                None => false,
            })
        })
        .map(|r| r.id)
        .collect();

    let mut seen = HashSet::new();
    let mut duplicate_rows = Vec::new();
    for r in rows {
        let key: Vec<(u8, u64)> = r.cells.iter().map(|c| c.key()).collect();
        if !seen.insert(key) {
            duplicate_rows.push(r.id);
        }
    }

    let predictors = schema.predictor_indices();
    let mut pairs = 0usize;
    let mut flagged_pairs = Vec::new();
    for (i, &a) in predictors.iter().enumerate() {
        for &b in &predictors[i + 1..] {
            pairs += 1;
            let assoc = association(schema, rows, a, b);
            if assoc > config.correlation_threshold {
                flagged_pairs.push(CorrelatedPair {
                    a: schema.variable(a).name.clone(),
                    b: schema.variable(b).name.clone(),
                    association: assoc,
                });
            }
        }
    }

    let continuous: Vec<usize> = predictors
        .iter()
        .copied()
        .filter(|&v| schema.variable(v).kind == VariableKind::Continuous)
        .collect();
    let skewed = continuous
        .iter()
        .filter(|&&v| {
            let vals: Vec<f64> = rows.iter().map(|r| r.cells[v].as_f64()).collect();
            skewness(&vals).abs() > config.skew_threshold
        })
        .count();

    let target = schema.target_index();
    let mut class_counts = vec![0usize; schema.classes().len()];
    for r in rows {
        class_counts[r.cells[target].as_f64() as usize] += 1;
    }
    let majority = *class_counts.iter().max().unwrap_or(&0);
    let minority = *class_counts.iter().min().unwrap_or(&0);

    let outlier_severity = outlier_rows.len() as f64 / n;
    let duplicate_severity = 1.0 - seen.len() as f64 / n;
    let correlation_severity = ratio(flagged_pairs.len(), pairs);
    let skew_severity = ratio(skewed, continuous.len());
    let imbalance_severity = if majority == 0 {
        0.0
    } else {
        1.0 - minority as f64 / majority as f64
    };
    let mean = (outlier_severity
        + duplicate_severity
        + correlation_severity
        + skew_severity
        + imbalance_severity)
        / 5.0;
    Ok(QualityReport {
        outlier_severity,
        duplicate_severity,
        correlation_severity,
        skew_severity,
        imbalance_severity,
        overall: (1.0 - mean).clamp(0.0, 1.0),
        flagged_pairs,
        outlier_rows,
        duplicate_rows,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Association strength in [0, 1] between two columns.
pub fn association(schema: &Schema, rows: &[&Row], a: usize, b: usize) -> f64 {
    let cat_a = schema.variable(a).kind.is_categorical();
    let cat_b = schema.variable(b).kind.is_categorical();
    let col = |v: usize| -> Vec<f64> { rows.iter().map(|r| r.cells[v].as_f64()).collect() };
    let level =
        |v: usize| -> Vec<u32> { rows.iter().map(|r| r.cells[v].as_f64() as u32).collect() };
    let value = match (cat_a, cat_b) {
        (false, false) => pearson(&col(a), &col(b)).abs(),
        (true, true) => cramers_v(&level(a), &level(b)),
        (true, false) => correlation_ratio(&level(a), &col(b)),
        (false, true) => correlation_ratio(&level(b), &col(a)),
    };
    value.clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Cramér's V without bias correction, over observed levels only.
pub fn cramers_v(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut table: HashMap<(u32, u32), f64> = HashMap::new();
    let mut ra: HashMap<u32, f64> = HashMap::new();
    let mut rb: HashMap<u32, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let k = ra.len().min(rb.len());
    if k < 2 {
        return 0.0;
    }
    // Sorted iteration keeps the floating-point sum order deterministic.
    let mut la: Vec<_> = ra.into_iter().collect();
    let mut lb: Vec<_> = rb.into_iter().collect();
    la.sort_by_key(|e| e.0);
    lb.sort_by_key(|e| e.0);
    let mut chi2 = 0.0;
    for &(x, na) in &la {
        for &(y, nb) in &lb {
            let expected = na * nb / n;
            let observed = table.get(&(x, y)).copied().unwrap_or(0.0);
            chi2 += (observed - expected) * (observed - expected) / expected;
        }
    }
    (chi2 / n / (k - 1) as f64).sqrt()
}

/// Correlation ratio: sqrt(between-group / total sum of squares).
pub fn correlation_ratio(groups: &[u32], values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sums: HashMap<u32, (f64, f64)> = HashMap::new();
    for (&g, &v) in groups.iter().zip(values) {
        let e = sums.entry(g).or_default();
        e.0 += v;
        e.1 += 1.0;
    }
    let total: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut groups: Vec<_> = sums.into_iter().collect();
    groups.sort_by_key(|e| e.0);
    let between: f64 = groups
        .iter()
        .map(|(_, (s, c))| {
            let m = s / c;
            c * (m - mean) * (m - mean)
        })
        .sum();
    (between / total).sqrt()
}

/// Fisher-Pearson coefficient of skewness `m3 / m2^1.5`; zero for constant data.
pub fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 1e-300 {
        return 0.0;
    }
    m3 / m2.powf(1.5)
}

/// The five severities and the overall score, without row lists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub outlier_severity: f64,
    pub duplicate_severity: f64,
    pub correlation_severity: f64,
    pub skew_severity: f64,
    pub imbalance_severity: f64,
    pub overall: f64,
}

/// Signed per-issue change from one report to another.
pub type QualityDelta = QualityScores;

impl QualityScores {
    /// Componentwise `self - other`.
    pub fn minus(&self, other: &QualityScores) -> QualityScores {
        QualityScores {
            outlier_severity: self.outlier_severity - other.outlier_severity,
            duplicate_severity: self.duplicate_severity - other.duplicate_severity,
            correlation_severity: self.correlation_severity - other.correlation_severity,
            skew_severity: self.skew_severity - other.skew_severity,
            imbalance_severity: self.imbalance_severity - other.imbalance_severity,
            overall: self.overall - other.overall,
        }
    }
}

impl QualityReport {
    pub fn scores(&self) -> QualityScores {
        QualityScores {
            outlier_severity: self.outlier_severity,
            duplicate_severity: self.duplicate_severity,
            correlation_severity: self.correlation_severity,
            skew_severity: self.skew_severity,
            imbalance_severity: self.imbalance_severity,
            overall: self.overall,
        }
    }
}

/// Componentwise `after - before`.
pub fn delta_quality(before: &QualityReport, after: &QualityReport) -> QualityDelta {
    after.scores().minus(&before.scores())
}
