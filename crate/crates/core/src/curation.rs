//! Expert refinement of a generated batch and interaction-bias drift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{GeneratedBatch, GeneratedRow};
use crate::dataset::{Cell, DatasetError, Provenance, RowId, TabularDataset};
use crate::model::{ModelArtifact, ModelError, Prediction};
use crate::quality::QualityConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("no generated row with id {0}")]
    UnknownRow(RowId),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("value `{value}` is outside the domain of `{variable}`")]
    OutOfDomain { variable: String, value: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    Set,
    Remove,
}

/// One committed change to a generated batch. `seq` is the entry's position
/// in the log and serves as its logical timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLogEntry {
    pub seq: u64,
    pub row_id: RowId,
    pub action: EditAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub prediction: Prediction,
    pub previous: Prediction,
    pub entry: EditLogEntry,
}

/// A generated batch under curation: the pristine batch, the edit log and
/// the current rows that result from replaying the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedBatch {
    pub pristine: GeneratedBatch,
    pub log: Vec<EditLogEntry>,
    pub current: GeneratedBatch,
}

impl CuratedBatch {
    pub fn new(batch: GeneratedBatch) -> Self {
        Self {
            current: batch.clone(),
            pristine: batch,
            log: Vec::new(),
        }
    }

    pub fn edit_count(&self) -> usize {
        self.log.len()
    }

    /// Re-predicts `row_id` with one cell changed, without committing.
    pub fn what_if(
        &self,
        dataset: &TabularDataset,
        model: &ModelArtifact,
        row_id: RowId,
        variable: &str,
        raw_value: &str,
    ) -> Result<WhatIf, CurationError> {
        let schema = dataset.schema();
        let row = self
            .current
            .row(row_id)
            .ok_or(CurationError::UnknownRow(row_id))?;
        let column = schema
            .index_of(variable)
            .ok_or_else(|| CurationError::UnknownVariable(variable.to_string()))?;
        let out_of_domain = || CurationError::OutOfDomain {
            variable: variable.to_string(),
            value: raw_value.to_string(),
        };
        let new = dataset
            .parse_value(column, raw_value)
            .map_err(|_| out_of_domain())?;
        let var = schema.variable(column);
        if var.segment_count() > 0 && !var.in_domain(new) {
            return Err(out_of_domain());
        }
        let mut cells = row.row.cells.clone();
        let old = cells[column];
        cells[column] = new;
        let prediction = model.predict(schema, &cells)?;
        Ok(WhatIf {
            previous: row.prediction.clone(),
            entry: EditLogEntry {
                seq: self.log.len() as u64,
                row_id,
                action: EditAction::Set,
                variable: Some(variable.to_string()),
                old: Some(old),
                new: Some(new),
                prediction: Some(prediction.clone()),
            },
            prediction,
        })
    }

    /// Log entry removing `row_id`.
    pub fn removal(&self, row_id: RowId) -> Result<EditLogEntry, CurationError> {
        self.current
            .row(row_id)
            .ok_or(CurationError::UnknownRow(row_id))?;
        Ok(EditLogEntry {
            seq: self.log.len() as u64,
            row_id,
            action: EditAction::Remove,
            variable: None,
            old: None,
            new: None,
            prediction: None,
        })
    }

    /// Appends a log entry and applies it to the current rows.
    pub fn commit(
        &mut self,
        entry: EditLogEntry,
        dataset: &TabularDataset,
        quality: &QualityConfig,
    ) -> Result<(), CurationError> {
        apply(&mut self.current, &self.pristine, &entry, dataset)?;
        self.log.push(entry);
        self.current.refresh_estimates(dataset, quality);
        Ok(())
    }

    /// Rebuilds the current rows from the pristine batch and the log.
    pub fn replay(
        pristine: &GeneratedBatch,
        log: &[EditLogEntry],
        dataset: &TabularDataset,
        quality: &QualityConfig,
    ) -> Result<Self, CurationError> {
        let mut curated = Self::new(pristine.clone());
        for entry in log {
            apply(&mut curated.current, &curated.pristine, entry, dataset)?;
            curated.log.push(entry.clone());
        }
        if !log.is_empty() {
            curated.current.refresh_estimates(dataset, quality);
        }
        Ok(curated)
    }
}

fn apply(
    current: &mut GeneratedBatch,
    pristine: &GeneratedBatch,
    entry: &EditLogEntry,
    dataset: &TabularDataset,
) -> Result<(), CurationError> {
    let pos = current
        .rows
        .iter()
        .position(|r| r.row.id == entry.row_id)
        .ok_or(CurationError::UnknownRow(entry.row_id))?;
    match entry.action {
        EditAction::Remove => {
            current.rows.remove(pos);
        }
        EditAction::Set => {
            let name = entry.variable.as_deref().unwrap_or_default();
            let column = dataset
                .schema()
                .index_of(name)
                .ok_or_else(|| CurationError::UnknownVariable(name.to_string()))?;
            let new = entry
                .new
                .ok_or_else(|| CurationError::SchemaMismatch("edit without a value".into()))?;
            let row = &mut current.rows[pos];
            row.row.cells[column] = new;
            if let Some(p) = &entry.prediction {
                row.prediction = p.clone();
            }
            let untouched = pristine
                .row(entry.row_id)
                .is_some_and(|p| same_cells(&p.row.cells, &row.row.cells));
            row.row.provenance = if untouched {
                Provenance::Generated
            } else {
                Provenance::Edited
            };
        }
    }
    Ok(())
}

fn same_cells(a: &[Cell], b: &[Cell]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.key() == y.key())
}

/// Composable row predicate for the generated-data view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RowFilter {
    All,
    And {
        filters: Vec<RowFilter>,
    },
    Or {
        filters: Vec<RowFilter>,
    },
    Not {
        filter: Box<RowFilter>,
    },
    /// Closed numeric range on a continuous variable.
    Range {
        variable: String,
        #[serde(default = "neg_inf")]
        min: f64,
        #[serde(default = "pos_inf")]
        max: f64,
    },
    Categories {
        variable: String,
        categories: Vec<String>,
    },
    /// Half-open confidence range `[min, max)`.
    Confidence {
        #[serde(default)]
        min: f64,
        #[serde(default = "pos_inf")]
        max: f64,
    },
    Predicted {
        class: String,
    },
    Edited,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

impl RowFilter {
    pub fn matches(
        &self,
        dataset: &TabularDataset,
        row: &GeneratedRow,
    ) -> Result<bool, CurationError> {
        let schema = dataset.schema();
        let column = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| CurationError::UnknownVariable(name.to_string()))
        };
        Ok(match self {
            RowFilter::All => true,
            RowFilter::And { filters } => {
                for f in filters {
                    if !f.matches(dataset, row)? {
                        return Ok(false);
                    }
                }
                true
            }
            RowFilter::Or { filters } => {
                for f in filters {
                    if f.matches(dataset, row)? {
                        return Ok(true);
                    }
                }
                false
            }
            RowFilter::Not { filter } => !filter.matches(dataset, row)?,
            RowFilter::Range { variable, min, max } => match row.row.cells[column(variable)?] {
                Cell::Number(x) => *min <= x && x <= *max,
                Cell::Category(_) => false,
            },
            RowFilter::Categories {
                variable,
                categories,
            } => {
                let c = column(variable)?;
                let value = dataset.render_cell(c, row.row.cells[c]);
                categories.contains(&value)
            }
            RowFilter::Confidence { min, max } => {
                *min <= row.prediction.confidence && row.prediction.confidence < *max
            }
            RowFilter::Predicted { class } => row.prediction.predicted_class == *class,
            RowFilter::Edited => row.row.provenance == Provenance::Edited,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    RowId,
    Confidence,
    Predicted,
    Variable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub key: SortKey,
    #[serde(default)]
    pub descending: bool,
}

/// Filtered, stably sorted view over the batch rows.
pub fn filter_sort<'a>(
    dataset: &TabularDataset,
    rows: &'a [GeneratedRow],
    filter: &RowFilter,
    ordering: Option<&Ordering>,
) -> Result<Vec<&'a GeneratedRow>, CurationError> {
    let mut view = Vec::new();
    for r in rows {
        if filter.matches(dataset, r)? {
            view.push(r);
        }
    }
    if let Some(o) = ordering {
        let column = match &o.key {
            SortKey::Variable(name) => Some(
                dataset
                    .schema()
                    .index_of(name)
                    .ok_or_else(|| CurationError::UnknownVariable(name.clone()))?,
            ),
            _ => None,
        };
        view.sort_by(|a, b| {
            let ord = match (&o.key, column) {
                (SortKey::RowId, _) => a.row.id.cmp(&b.row.id),
                (SortKey::Confidence, _) => {
                    a.prediction.confidence.total_cmp(&b.prediction.confidence)
                }
                (SortKey::Predicted, _) => a.prediction.class_index.cmp(&b.prediction.class_index),
                (SortKey::Variable(_), Some(c)) => {
                    a.row.cells[c].as_f64().total_cmp(&b.row.cells[c].as_f64())
                }
                (SortKey::Variable(_), None) => std::cmp::Ordering::Equal,
            };
            if o.descending {
                ord.reverse()
            } else {
                ord
            }
        });
    }
    Ok(view)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub segment: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDrift {
    pub variable: String,
    /// Total variation distance between the segment distributions.
    pub score: f64,
    pub flagged: bool,
    pub before: Vec<HistogramBin>,
    pub after: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub threshold: f64,
    pub variables: Vec<VariableDrift>,
    pub flagged: Vec<String>,
}

pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.15;

/// Total variation distance `0.5 * sum |p - q|` of two count histograms.
pub fn total_variation(a: &[u64], b: &[u64]) -> f64 {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    let tv: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na as f64 - y as f64 / nb as f64).abs())
        .sum::<f64>()
        / 2.0;
    tv.clamp(0.0, 1.0)
}

/// Segment-histogram drift of every predictor between two training sets.
pub fn drift_report(
    original: &TabularDataset,
    merged: &TabularDataset,
    threshold: f64,
) -> Result<DriftReport, CurationError> {
    if original.schema().digest() != merged.schema().digest() {
        return Err(CurationError::SchemaMismatch(
            "datasets have different schemas".into(),
        ));
    }
    let schema = original.schema();
    let mut variables = Vec::new();
    for v in schema.predictor_indices() {
        let var = schema.variable(v);
        let counts = |ds: &TabularDataset| -> Result<Vec<u64>, CurationError> {
            ds.segment_counts(v, ds.active_rows()).map_err(|e| match e {
                DatasetError::OutOfDomain { variable, value } => {
                    CurationError::OutOfDomain { variable, value }
                }
                other => CurationError::SchemaMismatch(other.to_string()),
            })
        };
        let before = counts(original)?;
        let after = counts(merged)?;
        let score = total_variation(&before, &after);
        let bins = |c: &[u64]| {
            var.segments()
                .into_iter()
                .zip(c)
                .map(|(s, &count)| HistogramBin {
                    segment: s.label,
                    count,
                })
                .collect()
        };
        variables.push(VariableDrift {
            variable: var.name.clone(),
            score,
            flagged: score > threshold,
            before: bins(&before),
            after: bins(&after),
        });
    }
    let flagged = variables
        .iter()
        .filter(|d| d.flagged)
        .map(|d| d.variable.clone())
        .collect();
    Ok(DriftReport {
        threshold,
        variables,
        flagged,
    })
}
