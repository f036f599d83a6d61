//! Constrained synthetic-row generation.
//!
//! Generation draws from the original training rows that satisfy the
//! constraint regions (the pool). Every generated row is checked against
//! its regions and the schema before it reaches a batch.

mod autotune;
mod backend;
mod constraint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use autotune::{naive_autotune, AutotuneConfig, AutotuneResult, TunedSegment};
pub use backend::{
    ExternalProcessBackend, GenerationBackend, GenerationRequest, NearestNeighborBackend, SynthRow,
};
pub use constraint::{matches_all, ConstraintRegion, ConstraintSet, Predicate, SegmentConstraint};

use crate::dataset::{
    check_cells, DatasetError, Provenance, Row, RowId, Schema, SplitTag, TabularDataset,
};
use crate::model::{ModelArtifact, ModelError, Prediction};
use crate::quality::{quality_of_rows, Fences, QualityConfig, QualityReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("constraint on `{variable}` is out of domain: {reason}")]
    ConstraintOutOfDomain { variable: String, reason: String },
    #[error("variable `{0}` is constrained more than once in a joint set")]
    DuplicateVariable(String),
    #[error("{requested} rows requested, cap is {cap}")]
    CapExceeded { requested: usize, cap: usize },
    #[error("generation needs at least 2 matching original rows, found {0}")]
    NoMatchingRows(usize),
    #[error("no original row satisfies every region of the joint constraint set")]
    InfeasibleJointRegion,
    #[error("generation backend failed: {0}")]
    Backend(String),
    #[error("generation backend returned invalid rows: {0}")]
    BackendOutputInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum rows in one batch.
    pub cap: usize,
    /// Warn when `existing / requested` falls below this.
    pub warning_threshold: f64,
    pub neighbors: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cap: 10_000,
            warning_threshold: 1.0,
            neighbors: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowCoverageWarning {
    pub constraint: SegmentConstraint,
    pub existing_count: usize,
    pub requested_count: usize,
    /// `existing_count / requested_count`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorId {
    pub backend: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRow {
    pub row: Row,
    pub parents: Vec<RowId>,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBatch {
    pub generator: GeneratorId,
    pub constraints: ConstraintSet,
    /// Training snapshot the batch was generated against.
    pub base_snapshot: String,
    pub rows: Vec<GeneratedRow>,
    pub warnings: Vec<LowCoverageWarning>,
    pub estimated_accuracy: Option<f64>,
    pub estimated_quality: Option<QualityReport>,
}

impl GeneratedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, id: RowId) -> Option<&GeneratedRow> {
        self.rows.iter().find(|r| r.row.id == id)
    }

    /// Recomputes the estimated accuracy and quality from the current rows.
    pub fn refresh_estimates(&mut self, dataset: &TabularDataset, quality: &QualityConfig) {
        let (accuracy, report) = estimates(dataset, &self.rows, quality);
        self.estimated_accuracy = accuracy;
        self.estimated_quality = report;
    }
}

/// Original training rows: the pool every constraint draws from.
pub fn original_train_rows(dataset: &TabularDataset) -> Vec<&Row> {
    dataset
        .active_rows()
        .filter(|r| r.provenance == Provenance::Original)
        .collect()
}

/// Pool rows and requested count for each generation call.
fn pools<'a>(
    set: &ConstraintSet,
    predicates: &[Predicate],
    originals: &[&'a Row],
) -> Vec<(Vec<&'a Row>, usize, Vec<usize>)> {
    if set.is_empty() {
        return Vec::new();
    }
    if set.joint {
        let pool = originals
            .iter()
            .copied()
            .filter(|r| matches_all(predicates, r))
            .collect();
        vec![(pool, set.batch_size(), (0..predicates.len()).collect())]
    } else {
        predicates
            .iter()
            .zip(&set.constraints)
            .enumerate()
            .map(|(i, (p, c))| {
                let pool = originals
                    .iter()
                    .copied()
                    .filter(|r| p.matches(&r.cells))
                    .collect();
                (pool, c.count, vec![i])
            })
            .collect()
    }
}

/// Low-coverage warnings for a constraint set; never blocks generation.
pub fn plan(
    set: &ConstraintSet,
    dataset: &TabularDataset,
    config: &AugmentConfig,
) -> Result<Vec<LowCoverageWarning>, AugmentError> {
    let predicates = set.compile(dataset.schema(), config.cap)?;
    let originals = original_train_rows(dataset);
    let mut warnings = Vec::new();
    for (pool, _, members) in pools(set, &predicates, &originals) {
        for i in members {
            let c = &set.constraints[i];
            let ratio = pool.len() as f64 / c.count as f64;
            if ratio < config.warning_threshold {
                warnings.push(LowCoverageWarning {
                    constraint: c.clone(),
                    existing_count: pool.len(),
                    requested_count: c.count,
                    ratio,
                });
            }
        }
    }
    Ok(warnings)
}

/// Generates a batch against the current training rows and scores it with
/// the current model.
pub fn generate(
    set: &ConstraintSet,
    dataset: &TabularDataset,
    model: &ModelArtifact,
    backend: &dyn GenerationBackend,
    seed: u64,
    config: &AugmentConfig,
    quality: &QualityConfig,
) -> Result<GeneratedBatch, AugmentError> {
    model.check_fresh(dataset)?;
    let schema = dataset.schema();
    let predicates = set.compile(schema, config.cap)?;
    let warnings = plan(set, dataset, config)?;
    let originals = original_train_rows(dataset);
    let split = if dataset.is_split() {
        SplitTag::Train
    } else {
        SplitTag::Unsplit
    };
    let mut next_id = dataset.next_row_id().0;
    let mut rows = Vec::with_capacity(set.batch_size());

    for (stream, (pool, count, members)) in
        pools(set, &predicates, &originals).into_iter().enumerate()
    {
        if set.joint && predicates.len() > 1 && pool.is_empty() {
            return Err(AugmentError::InfeasibleJointRegion);
        }
        if pool.len() < 2 {
            return Err(AugmentError::NoMatchingRows(pool.len()));
        }
        let request = GenerationRequest {
            schema,
            pool: &pool,
            count,
            seed,
            stream: stream as u64,
        };
        let produced = backend.generate(&request)?;
        if produced.len() != count {
            return Err(AugmentError::BackendOutputInvalid(format!(
                "expected {count} rows, got {}",
                produced.len()
            )));
        }
        let active: Vec<&Predicate> = members.iter().map(|&i| &predicates[i]).collect();
        for synth in produced {
            validate(schema, &synth, &active)?;
            let prediction =
                Prediction::from_probabilities(&model.classes, &model.probabilities(&synth.cells));
            rows.push(GeneratedRow {
                row: Row {
                    id: RowId(next_id),
                    provenance: Provenance::Generated,
                    split,
                    cells: synth.cells,
                },
                parents: synth.parents,
                prediction,
            });
            next_id += 1;
        }
    }

    let (estimated_accuracy, estimated_quality) = estimates(dataset, &rows, quality);
    Ok(GeneratedBatch {
        generator: GeneratorId {
            backend: backend.name().to_string(),
            seed,
        },
        constraints: set.clone(),
        base_snapshot: dataset.train_snapshot_hash(),
        rows,
        warnings,
        estimated_accuracy,
        estimated_quality,
    })
}

fn validate(
    schema: &Schema,
    synth: &SynthRow,
    predicates: &[&Predicate],
) -> Result<(), AugmentError> {
    check_cells(schema, &synth.cells)
        .map_err(|e| AugmentError::BackendOutputInvalid(e.to_string()))?;
    for (v, var) in schema.variables().iter().enumerate() {
        if var.segment_count() > 0 && !var.in_domain(synth.cells[v]) {
            return Err(AugmentError::BackendOutputInvalid(format!(
                "`{}` value {} is outside its segments",
                var.name, synth.cells[v]
            )));
        }
    }
    if let Some(p) = predicates.iter().find(|p| !p.matches(&synth.cells)) {
        return Err(AugmentError::BackendOutputInvalid(format!(
            "row violates the region on `{}`",
            schema.variable(p.column).name
        )));
    }
    Ok(())
}

/// Prediction/label agreement and quality of generated rows.
fn estimates(
    dataset: &TabularDataset,
    rows: &[GeneratedRow],
    quality: &QualityConfig,
) -> (Option<f64>, Option<QualityReport>) {
    if rows.is_empty() {
        return (None, None);
    }
    let target = dataset.schema().target_index();
    let agree = rows
        .iter()
        .filter(|r| r.prediction.class_index == r.row.cells[target].as_f64() as usize)
        .count();
    let fences = Fences::reference(dataset, quality.outlier_iqr_multiplier);
    let refs: Vec<&Row> = rows.iter().map(|r| &r.row).collect();
    let report = quality_of_rows(dataset.schema(), &refs, &fences, quality).ok();
    (Some(agree as f64 / rows.len() as f64), report)
}

#[cfg(test)]
mod tests;
