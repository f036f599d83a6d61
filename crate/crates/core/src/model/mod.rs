//! Prediction model: training, per-sample confidence, per-segment accuracy and
//! a versioned on-disk artifact format.

pub mod gbdt;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{check_cells, Cell, DatasetError, Row, Schema, TabularDataset};
pub use gbdt::{Classifier, GbdtEnsemble, Hyperparameters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("training rows contain a single target class")]
    DegenerateTarget,
    #[error("too few rows: {0}")]
    TooFewRows(String),
    #[error("model was trained on snapshot {model}, dataset is at {dataset}")]
    ModelStale { model: String, dataset: String },
    #[error("train and held-out rows share ids")]
    LeakageViolation,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Learner behind the classifier interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    GradientBoosting(GbdtEnsemble),
}

impl Learner {
    fn classifier(&self) -> &dyn Classifier {
        match self {
            Learner::GradientBoosting(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub learner: Learner,
    pub hyperparameters: Hyperparameters,
    pub classes: Vec<String>,
    /// Schema columns used as features, in order.
    pub features: Vec<usize>,
    pub schema_digest: String,
    pub train_snapshot_hash: String,
    pub train_rows: usize,
    pub heldout_correct: usize,
    pub heldout_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub class: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted_class: String,
    pub class_index: usize,
    pub class_probabilities: Vec<ClassProbability>,
    pub confidence: f64,
}

impl Prediction {
    /// Predicted class is the argmax (first on ties); confidence is its probability.
    pub fn from_probabilities(classes: &[String], probs: &[f64]) -> Self {
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Self {
            predicted_class: classes[best].clone(),
            class_index: best,
            class_probabilities: classes
                .iter()
                .zip(probs)
                .map(|(c, &p)| ClassProbability {
                    class: c.clone(),
                    probability: p,
                })
                .collect(),
            confidence: probs[best],
        }
    }
}

/// Correct/total counts with the derived ratio; `accuracy` is absent when
/// there were no rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

impl AccuracyCell {
    pub fn new(correct: usize, total: usize) -> Self {
        Self {
            correct,
            total,
            accuracy: (total > 0).then(|| correct as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAccuracy {
    pub segment: String,
    /// One cell per target class, in class order.
    pub by_outcome: Vec<AccuracyCell>,
    pub overall: AccuracyCell,
}

const MAGIC: &[u8; 8] = b"DBMODEL\0";
const FORMAT_VERSION: u32 = 1;

impl ModelArtifact {
    /// Trains on the dataset's training rows and scores the held-out rows.
    pub fn train(dataset: &TabularDataset, params: &Hyperparameters) -> Result<Self, ModelError> {
        let train: Vec<&Row> = dataset.active_rows().collect();
        let heldout_ids: HashSet<_> = dataset.heldout_rows().map(|r| r.id).collect();
        if train.iter().any(|r| heldout_ids.contains(&r.id)) {
            return Err(ModelError::LeakageViolation);
        }
        if train.len() < 2 {
            return Err(ModelError::TooFewRows(format!(
                "{} training rows",
                train.len()
            )));
        }
        let schema = dataset.schema();
        let target = schema.target_index();
        let features = schema.predictor_indices();
        let x: Vec<Vec<f64>> = train.iter().map(|r| encode(&features, &r.cells)).collect();
        let y: Vec<usize> = train
            .iter()
            .map(|r| r.cells[target].as_f64() as usize)
            .collect();
        if y.iter().all(|&c| c == y[0]) {
            return Err(ModelError::DegenerateTarget);
        }
        let ensemble = gbdt::fit(&x, &y, schema.classes().len(), params);
        let mut model = Self {
            learner: Learner::GradientBoosting(ensemble),
            hyperparameters: params.clone(),
            classes: schema.classes().to_vec(),
            features,
            schema_digest: schema.digest(),
            train_snapshot_hash: dataset.train_snapshot_hash(),
            train_rows: train.len(),
            heldout_correct: 0,
            heldout_total: 0,
        };
        let (correct, total) = dataset.heldout_rows().fold((0, 0), |(c, t), r| {
            let hit = model.predict_index(&r.cells) == r.cells[target].as_f64() as usize;
            (c + usize::from(hit), t + 1)
        });
        model.heldout_correct = correct;
        model.heldout_total = total;
        Ok(model)
    }

    /// Held-out accuracy, absent when the dataset had no held-out rows.
    pub fn heldout_accuracy(&self) -> Option<f64> {
        AccuracyCell::new(self.heldout_correct, self.heldout_total).accuracy
    }

    /// Wilson score interval on the held-out accuracy.
    pub fn accuracy_interval(&self, z: f64) -> Option<(f64, f64)> {
        wilson_interval(self.heldout_correct, self.heldout_total, z)
    }

    pub fn probabilities(&self, cells: &[Cell]) -> Vec<f64> {
        self.learner
            .classifier()
            .predict_proba(&encode(&self.features, cells))
    }

    fn predict_index(&self, cells: &[Cell]) -> usize {
        Prediction::from_probabilities(&self.classes, &self.probabilities(cells)).class_index
    }

    /// Predicts one full schema row; the target cell is ignored.
    pub fn predict(&self, schema: &Schema, cells: &[Cell]) -> Result<Prediction, ModelError> {
        if schema.digest() != self.schema_digest {
            return Err(ModelError::SchemaMismatch("schema digest differs".into()));
        }
        check_cells(schema, cells).map_err(|e| ModelError::SchemaMismatch(e.to_string()))?;
        Ok(Prediction::from_probabilities(
            &self.classes,
            &self.probabilities(cells),
        ))
    }

    pub fn check_fresh(&self, dataset: &TabularDataset) -> Result<(), ModelError> {
        let current = dataset.train_snapshot_hash();
        if current != self.train_snapshot_hash {
            return Err(ModelError::ModelStale {
                model: self.train_snapshot_hash.clone(),
                dataset: current,
            });
        }
        Ok(())
    }

    /// Held-out accuracy broken down by segment of `variable` and true outcome.
    pub fn segment_accuracy(
        &self,
        dataset: &TabularDataset,
        variable: &str,
    ) -> Result<Vec<SegmentAccuracy>, ModelError> {
        self.check_fresh(dataset)?;
        let var_idx = dataset
            .schema()
            .index_of(variable)
            .ok_or_else(|| DatasetError::UnknownVariable(variable.to_string()))?;
        let predicted = self.heldout_predictions(dataset);
        segment_accuracy_from(dataset, var_idx, &predicted)
    }

    /// Predicted class index for every held-out row, in row order.
    pub(crate) fn heldout_predictions(&self, dataset: &TabularDataset) -> Vec<usize> {
        dataset
            .heldout_rows()
            .map(|r| self.predict_index(&r.cells))
            .collect()
    }

    /// Versioned binary encoding: magic, format version, schema digest, then a
    /// length-prefixed JSON payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("model serializes");
        let digest = hex::decode(&self.schema_digest).unwrap_or_default();
        let mut out = Vec::with_capacity(payload.len() + 56);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(digest.len() as u32).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Decodes a model file, refusing it when its schema digest differs from
    /// `schema`.
    pub fn from_bytes(bytes: &[u8], schema: &Schema) -> Result<Self, ModelError> {
        let model = Self::decode(bytes)?;
        if model.schema_digest != schema.digest() {
            return Err(ModelError::SchemaMismatch(
                "model file was trained against a different schema".into(),
            ));
        }
        Ok(model)
    }

    /// Decodes without a schema check.
    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Format(m.to_string());
        let mut rest = bytes;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if rest.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a model file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let dlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header_digest = hex::encode(take(dlen)?);
        let plen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let payload = take(plen)?;
        let model: Self =
            serde_json::from_slice(payload).map_err(|e| ModelError::Format(e.to_string()))?;
        if model.schema_digest != header_digest {
            return Err(bad("header digest does not match payload"));
        }
        Ok(model)
    }

    /// Content digest of the encoded artifact.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Per-segment accuracy given the predicted class of each held-out row.
pub(crate) fn segment_accuracy_from(
    dataset: &TabularDataset,
    var_idx: usize,
    predicted: &[usize],
) -> Result<Vec<SegmentAccuracy>, ModelError> {
    let schema = dataset.schema();
    let var = schema.variable(var_idx);
    let segments = var.segments();
    if segments.is_empty() {
        return Err(DatasetError::Unsegmented(var.name.clone()).into());
    }
    let target = schema.target_index();
    let n_classes = schema.classes().len();
    let mut cells = vec![vec![(0usize, 0usize); n_classes]; segments.len()];
    for (row, &pred) in dataset.heldout_rows().zip(predicted) {
        let seg = var.segment_index(row.cells[var_idx])?;
        let truth = row.cells[target].as_f64() as usize;
        let cell = &mut cells[seg][truth];
        cell.1 += 1;
        if pred == truth {
            cell.0 += 1;
        }
    }
    Ok(segments
        .into_iter()
        .zip(cells)
        .map(|(s, by)| {
            let (c, t) = by.iter().fold((0, 0), |(c, t), x| (c + x.0, t + x.1));
            SegmentAccuracy {
                segment: s.label,
                by_outcome: by.iter().map(|&(c, t)| AccuracyCell::new(c, t)).collect(),
                overall: AccuracyCell::new(c, t),
            }
        })
        .collect())
}

fn encode(features: &[usize], cells: &[Cell]) -> Vec<f64> {
    features.iter().map(|&i| cells[i].as_f64()).collect()
}

pub fn wilson_interval(correct: usize, total: usize, z: f64) -> Option<(f64, f64)> {
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let p = correct as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // The bounds contain p analytically; clamp away rounding at p = 0 or 1.
    Some(((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0)))
}
