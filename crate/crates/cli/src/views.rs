//! Response shapes shared by the HTTP API and the CLI's JSON output.

use debias_core::augment::{GeneratedRow, GeneratorId, LowCoverageWarning};
use debias_core::curation::{
    filter_sort, CuratedBatch, CurationError, EditLogEntry, Ordering, RowFilter,
};
use debias_core::quality::QualityScores;
use debias_core::{
    ConstraintSet, Prediction, Provenance, RowId, Session, SessionError, TabularDataset,
    VariableKind,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorView {
    pub name: String,
    pub kind: VariableKind,
    pub unit: String,
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overview {
    pub session: String,
    pub heldout_accuracy: Option<f64>,
    /// Wilson 95% interval of the held-out accuracy.
    pub accuracy_interval: Option<(f64, f64)>,
    /// Change against the previous history entry; zero before any retrain.
    pub accuracy_delta: Option<f64>,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub overall_rr: f64,
    pub overall_cr: f64,
    pub quality_overall: f64,
    pub target: String,
    pub classes: Vec<String>,
    pub predictors: Vec<PredictorView>,
    pub history_len: usize,
    pub pending_rows: Option<usize>,
}

pub fn overview(session: &Session) -> Overview {
    let entry = session.history().last().expect("history has a baseline");
    let schema = session.dataset().schema();
    Overview {
        session: session.id.clone(),
        heldout_accuracy: entry.heldout_accuracy,
        accuracy_interval: session.model().accuracy_interval(1.96),
        accuracy_delta: entry.delta.accuracy,
        train_rows: entry.train_rows,
        heldout_rows: entry.heldout_rows,
        overall_rr: entry.overall_rr,
        overall_cr: entry.overall_cr,
        quality_overall: entry.quality.overall,
        target: schema.target().name.clone(),
        classes: schema.classes().to_vec(),
        predictors: schema
            .predictor_indices()
            .into_iter()
            .map(|v| {
                let var = schema.variable(v);
                PredictorView {
                    name: var.name.clone(),
                    kind: var.kind,
                    unit: var.unit.clone(),
                    segments: var.segments().into_iter().map(|s| s.label).collect(),
                }
            })
            .collect(),
        history_len: session.history().len(),
        pending_rows: session.pending().map(|p| p.current.len()),
    }
}

/// A generated row with its cells rendered as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowView {
    pub row_id: RowId,
    pub provenance: Provenance,
    pub values: Vec<String>,
    pub parents: Vec<RowId>,
    pub prediction: Prediction,
}

pub fn row_view(dataset: &TabularDataset, row: &GeneratedRow) -> RowView {
    RowView {
        row_id: row.row.id,
        provenance: row.row.provenance,
        values: row
            .row
            .cells
            .iter()
            .enumerate()
            .map(|(v, &c)| dataset.render_cell(v, c))
            .collect(),
        parents: row.parents.clone(),
        prediction: row.prediction.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub generator: GeneratorId,
    pub constraints: ConstraintSet,
    pub columns: Vec<String>,
    /// Rows in the batch before filtering.
    pub total: usize,
    pub rows: Vec<RowView>,
    pub warnings: Vec<LowCoverageWarning>,
    pub estimated_accuracy: Option<f64>,
    pub estimated_quality: Option<QualityScores>,
    pub edit_count: usize,
    pub log: Vec<EditLogEntry>,
}

pub fn batch_view(
    dataset: &TabularDataset,
    curated: &CuratedBatch,
    filter: &RowFilter,
    ordering: Option<&Ordering>,
) -> Result<BatchView, CurationError> {
    let batch = &curated.current;
    let rows = filter_sort(dataset, &batch.rows, filter, ordering)?;
    Ok(BatchView {
        generator: batch.generator.clone(),
        constraints: batch.constraints.clone(),
        columns: dataset
            .schema()
            .variables()
            .iter()
            .map(|v| v.name.clone())
            .collect(),
        total: batch.len(),
        rows: rows.into_iter().map(|r| row_view(dataset, r)).collect(),
        warnings: batch.warnings.clone(),
        estimated_accuracy: batch.estimated_accuracy,
        estimated_quality: batch.estimated_quality.as_ref().map(|q| q.scores()),
        edit_count: curated.edit_count(),
        log: curated.log.clone(),
    })
}

/// Whole pending batch, unfiltered.
pub fn pending_view(session: &Session) -> Result<BatchView, SessionError> {
    let pending = session.pending().ok_or(SessionError::NoPendingBatch)?;
    Ok(batch_view(
        session.dataset(),
        pending,
        &RowFilter::All,
        None,
    )?)
}
