//! Representation rate, coverage, per-segment model accuracy and the
//! aggregate RR/CR scores.
//!
//! The representation rate of a segment is its count divided by the largest
//! segment count of the same variable. A segment is covered when its count
//! reaches the coverage threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, Segment, TabularDataset};
use crate::model::{segment_accuracy_from, AccuracyCell, ModelArtifact, ModelError};
use crate::table;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no segments")]
    NoSegments,
    #[error("every segment count is zero")]
    AllZeroCounts,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// `count / max(count)` per segment.
pub fn representation_rates(counts: &[u64]) -> Result<Vec<f64>, MetricsError> {
    let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    representation_rates_f64(&as_f64)
}

/// Same as [`representation_rates`] over fractional (expected) counts.
pub fn representation_rates_f64(counts: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if counts.is_empty() {
        return Err(MetricsError::NoSegments);
    }
    let max = counts.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(MetricsError::AllZeroCounts);
    }
    Ok(counts
        .iter()
        .map(|&c| if c == max { 1.0 } else { c / max })
        .collect())
}

pub fn coverage(counts: &[u64], threshold: u64) -> Vec<bool> {
    counts.iter().map(|&c| c >= threshold).collect()
}

/// Minimum segment size for coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageThreshold {
    /// `max(30, ceil(1% of training rows))`.
    #[default]
    Auto,
    Absolute(u64),
}

impl CoverageThreshold {
    pub fn resolve(self, train_rows: usize) -> u64 {
        match self {
            CoverageThreshold::Auto => 30u64.max((train_rows as f64 * 0.01).ceil() as u64),
            CoverageThreshold::Absolute(t) => t.max(1),
        }
    }
}

// Serialized as the string `"auto"` or an integer.
impl Serialize for CoverageThreshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Absolute(t) => s.serialize_u64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for CoverageThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(t) => Ok(Self::Absolute(t)),
            Raw::Text(s) => Self::parse(&s).ok_or_else(|| {
                serde::de::Error::custom(format!("invalid coverage threshold `{s}`"))
            }),
        }
    }
}

impl CoverageThreshold {
    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Some(Self::Auto)
        } else {
            s.parse().ok().map(Self::Absolute)
        }
    }
}

/// How segment rates aggregate into the overall RR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RrAggregation {
    /// Mean over variables of each variable's mean segment rate.
    #[default]
    VariableMean,
    /// Mean over every segment of every variable.
    SegmentMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub coverage: CoverageThreshold,
    pub aggregation: RrAggregation,
    pub insight_limit: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            coverage: CoverageThreshold::Auto,
            aggregation: RrAggregation::VariableMean,
            insight_limit: 10,
        }
    }
}

/// Overall (RR, CR) from per-variable segment counts.
pub fn aggregate_scores(
    per_variable: &[Vec<f64>],
    threshold: f64,
    aggregation: RrAggregation,
) -> Result<(f64, f64), MetricsError> {
    if per_variable.is_empty() {
        return Err(MetricsError::NoSegments);
    }
    let mut var_means = Vec::with_capacity(per_variable.len());
    let mut all_rates = Vec::new();
    let (mut covered, mut segments) = (0usize, 0usize);
    for counts in per_variable {
        let rates = representation_rates_f64(counts)?;
        var_means.push(mean(&rates));
        all_rates.extend(rates);
        covered += counts.iter().filter(|&&c| c >= threshold).count();
        segments += counts.len();
    }
    let rr = match aggregation {
        RrAggregation::VariableMean => mean(&var_means),
        RrAggregation::SegmentMean => mean(&all_rates),
    };
    Ok((rr, covered as f64 / segments as f64))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeAccuracy {
    pub class: String,
    #[serde(flatten)]
    pub cell: AccuracyCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segment: Segment,
    pub count: u64,
    pub representation_rate: f64,
    pub covered: bool,
    pub coverage_threshold: u64,
    pub accuracy_by_outcome: Vec<OutcomeAccuracy>,
    pub accuracy: AccuracyCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableBias {
    pub variable: String,
    /// Mean segment representation rate.
    pub rr: f64,
    /// Fraction of covered segments.
    pub cr: f64,
    pub segments: Vec<SegmentStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsightReason {
    LowRr,
    LowCoverage,
    LowAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub variable: String,
    pub segment: String,
    pub reason: InsightReason,
    /// Normalized score in [0, 1); lower is worse.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub snapshot: String,
    pub coverage_threshold: u64,
    pub aggregation: RrAggregation,
    pub overall_rr: f64,
    pub overall_cr: f64,
    pub heldout_accuracy: Option<f64>,
    pub variables: Vec<VariableBias>,
    pub quick_insights: Vec<Insight>,
}

impl BiasReport {
    pub fn variable(&self, name: &str) -> Option<&VariableBias> {
        self.variables.iter().find(|v| v.variable == name)
    }

    /// Aligned text table: one line per segment.
    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        for v in &self.variables {
            for s in &v.segments {
                rows.push(vec![
                    v.variable.clone(),
                    s.segment.label.clone(),
                    s.count.to_string(),
                    table::ratio(s.representation_rate),
                    if s.covered { "yes" } else { "no" }.to_string(),
                    table::opt_ratio(s.accuracy.accuracy),
                ]);
            }
        }
        let mut out = format!(
            "overall RR {}  overall CR {}  coverage threshold {}  held-out accuracy {}\n\n",
            table::ratio(self.overall_rr),
            table::ratio(self.overall_cr),
            self.coverage_threshold,
            table::opt_ratio(self.heldout_accuracy),
        );
        out.push_str(&table::render(
            &[
                "variable", "segment", "count", "rate", "covered", "accuracy",
            ],
            &rows,
        ));
        if !self.quick_insights.is_empty() {
            out.push_str("\nquick insights\n");
            let rows: Vec<Vec<String>> = self
                .quick_insights
                .iter()
                .map(|i| {
                    vec![
                        i.variable.clone(),
                        i.segment.clone(),
                        format!("{:?}", i.reason),
                        table::ratio(i.score),
                    ]
                })
                .collect();
            out.push_str(&table::render(
                &["variable", "segment", "reason", "score"],
                &rows,
            ));
        }
        out
    }
}

/// Bias report over the current training rows, with per-segment accuracy
/// taken from the held-out rows.
pub fn bias_report(
    dataset: &TabularDataset,
    model: &ModelArtifact,
    config: &BiasConfig,
) -> Result<BiasReport, MetricsError> {
    model.check_fresh(dataset)?;
    let schema = dataset.schema();
    let train_rows = dataset.active_rows().count();
    let threshold = config.coverage.resolve(train_rows);
    let classes = schema.classes();
    let predicted = model.heldout_predictions(dataset);

    let mut variables = Vec::new();
    let mut per_var_counts = Vec::new();
    for var_idx in schema.predictor_indices() {
        let var = schema.variable(var_idx);
        let counts = dataset.segment_counts(var_idx, dataset.active_rows())?;
        let rates = representation_rates(&counts)?;
        let flags = coverage(&counts, threshold);
        let accuracy = segment_accuracy_from(dataset, var_idx, &predicted)?;
        let segments: Vec<SegmentStats> = var
            .segments()
            .into_iter()
            .zip(accuracy)
            .enumerate()
            .map(|(i, (segment, acc))| SegmentStats {
                segment,
                count: counts[i],
                representation_rate: rates[i],
                covered: flags[i],
                coverage_threshold: threshold,
                accuracy_by_outcome: classes
                    .iter()
                    .zip(&acc.by_outcome)
                    .map(|(c, cell)| OutcomeAccuracy {
                        class: c.clone(),
                        cell: *cell,
                    })
                    .collect(),
                accuracy: acc.overall,
            })
            .collect();
        variables.push(VariableBias {
            variable: var.name.clone(),
            rr: mean(&rates),
            cr: flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64,
            segments,
        });
        per_var_counts.push(counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    }
    let (overall_rr, overall_cr) =
        aggregate_scores(&per_var_counts, threshold as f64, config.aggregation)?;
    let heldout_accuracy = model.heldout_accuracy();
    let quick_insights = quick_insights(&variables, heldout_accuracy, config.insight_limit);
    Ok(BiasReport {
        snapshot: dataset.train_snapshot_hash(),
        coverage_threshold: threshold,
        aggregation: config.aggregation,
        overall_rr,
        overall_cr,
        heldout_accuracy,
        variables,
        quick_insights,
    })
}

/// Segments whose rate, coverage or accuracy is low, worst first. Each
/// segment contributes its lowest normalized score: the representation rate,
/// `count / threshold` when uncovered, and segment accuracy over overall
/// accuracy when below it.
fn quick_insights(variables: &[VariableBias], overall: Option<f64>, limit: usize) -> Vec<Insight> {
    let mut found = Vec::new();
    for v in variables {
        for s in &v.segments {
            let mut worst: Option<(f64, InsightReason)> = None;
            let mut consider = |score: f64, reason| {
                if score < 1.0 && worst.is_none_or(|(w, _)| score < w) {
                    worst = Some((score, reason));
                }
            };
            consider(s.representation_rate, InsightReason::LowRr);
            if !s.covered {
                consider(
                    s.count as f64 / s.coverage_threshold as f64,
                    InsightReason::LowCoverage,
                );
            }
            if let (Some(acc), Some(all)) = (s.accuracy.accuracy, overall) {
                if all > 0.0 && acc < all {
                    consider(acc / all, InsightReason::LowAccuracy);
                }
            }
            if let Some((score, reason)) = worst {
                found.push(Insight {
                    variable: v.variable.clone(),
                    segment: s.segment.label.clone(),
                    reason,
                    score,
                });
            }
        }
    }
    // Stable: ties keep variable then segment order.
    found.sort_by(|a, b| a.score.total_cmp(&b.score));
    found.truncate(limit);
    found
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub threshold: u64,
    pub covered: AccuracyCell,
    pub uncovered: AccuracyCell,
}

/// Sweeps coverage thresholds and reports held-out accuracy over the
/// (row, variable) pairs falling in covered versus uncovered segments.
pub fn coverage_calibration(
    dataset: &TabularDataset,
    model: &ModelArtifact,
    thresholds: &[u64],
) -> Result<Vec<CalibrationPoint>, MetricsError> {
    model.check_fresh(dataset)?;
    let schema = dataset.schema();
    let predicted = model.heldout_predictions(dataset);
    let mut per_var = Vec::new();
    for var_idx in schema.predictor_indices() {
        let counts = dataset.segment_counts(var_idx, dataset.active_rows())?;
        let acc = segment_accuracy_from(dataset, var_idx, &predicted)?;
        per_var.push((counts, acc));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut cc, mut ct, mut uc, mut ut) = (0, 0, 0, 0);
            for (counts, acc) in &per_var {
                for (count, seg) in counts.iter().zip(acc) {
                    if *count >= t {
                        cc += seg.overall.correct;
                        ct += seg.overall.total;
                    } else {
                        uc += seg.overall.correct;
                        ut += seg.overall.total;
                    }
                }
            }
            CalibrationPoint {
                threshold: t,
                covered: AccuracyCell::new(cc, ct),
                uncovered: AccuracyCell::new(uc, ut),
            }
        })
        .collect())
}
