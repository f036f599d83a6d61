//! Event-sourced curation session.
//!
//! Every mutation is computed as an [`Event`] against the current state,
//! persisted (objects first, then the event record), and only then applied.
//! Replaying the persisted records reproduces the state exactly. Datasets,
//! models and generated batches live in a content-addressed object store and
//! events refer to them by digest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{
    self, AugmentConfig, AugmentError, ConstraintSet, ExternalProcessBackend, GeneratedBatch,
    GenerationBackend, GeneratorId, LowCoverageWarning, NearestNeighborBackend,
};
use crate::curation::{
    drift_report, CuratedBatch, CurationError, DriftReport, EditLogEntry, WhatIf,
};
use crate::dataset::{DatasetError, RowId, SplitTag, TabularDataset};
use crate::metrics::{bias_report, BiasConfig, BiasReport, MetricsError};
use crate::model::gbdt::Hyperparameters;
use crate::model::{ModelArtifact, ModelError};
use crate::quality::{quality_report, QualityConfig, QualityError, QualityReport, QualityScores};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error("a session needs a dataset with a train/held-out split")]
    NotSplit,
    #[error("no generated batch is pending")]
    NoPendingBatch,
    #[error("the pending batch was generated against a different training snapshot")]
    StaleBatch,
    #[error("retraining needs acknowledgement of the drift report")]
    AcknowledgementRequired(Box<DriftReport>),
    #[error("no history entry {0}")]
    UnknownHistoryIndex(usize),
    #[error("held-out rows changed during a merge")]
    LeakageViolation,
    #[error("storage error: {0}")]
    Io(String),
    #[error("corrupt session log: {0}")]
    Corrupt(String),
}

impl From<io::Error> for SessionError {
    fn from(e: io::Error) -> Self {
        SessionError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSettings {
    pub bias: BiasConfig,
    pub quality: QualityConfig,
    pub augment: AugmentConfig,
    pub model: Hyperparameters,
    pub drift_threshold: f64,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            bias: BiasConfig::default(),
            quality: QualityConfig::default(),
            augment: AugmentConfig::default(),
            model: Hyperparameters::default(),
            drift_threshold: crate::curation::DEFAULT_DRIFT_THRESHOLD,
        }
    }
}

/// A stored object and its encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Object {
    Dataset(Arc<TabularDataset>),
    Model(Arc<ModelArtifact>),
    Batch(Arc<GeneratedBatch>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Dataset,
    Model,
    Batch,
}

impl Object {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Object::Dataset(d) => serde_json::to_vec(d.as_ref()).expect("dataset serializes"),
            Object::Model(m) => m.to_bytes(),
            Object::Batch(b) => serde_json::to_vec(b.as_ref()).expect("batch serializes"),
        }
    }

    pub fn decode(kind: ObjectKind, bytes: &[u8]) -> Result<Self, SessionError> {
        let corrupt = |e: String| SessionError::Corrupt(e);
        Ok(match kind {
            ObjectKind::Dataset => Object::Dataset(Arc::new(
                serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?,
            )),
            ObjectKind::Model => Object::Model(Arc::new(
                ModelArtifact::decode(bytes).map_err(|e| corrupt(e.to_string()))?,
            )),
            ObjectKind::Batch => Object::Batch(Arc::new(
                serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?,
            )),
        })
    }
}

/// Hex sha256 of the bytes: the object's address.
pub fn object_ref(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Durable storage for one session.
pub trait Persistence {
    fn put_object(&mut self, reference: &str, bytes: &[u8]) -> io::Result<()>;
    fn get_object(&self, reference: &str) -> io::Result<Vec<u8>>;
    fn append(&mut self, record: &EventRecord) -> io::Result<()>;
    fn records(&self) -> io::Result<Vec<EventRecord>>;
}

/// Volatile storage, for tests and one-shot runs.
#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    pub objects: HashMap<String, Vec<u8>>,
    pub log: Vec<EventRecord>,
}

impl Persistence for MemoryStore {
    fn put_object(&mut self, reference: &str, bytes: &[u8]) -> io::Result<()> {
        self.objects.insert(reference.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get_object(&self, reference: &str) -> io::Result<Vec<u8>> {
        self.objects
            .get(reference)
            .cloned()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, reference.to_string()))
    }

    fn append(&mut self, record: &EventRecord) -> io::Result<()> {
        self.log.push(record.clone());
        Ok(())
    }

    fn records(&self) -> io::Result<Vec<EventRecord>> {
        Ok(self.log.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryKind {
    Baseline,
    Retrain,
    Revert { to: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub variable: String,
    pub rr: f64,
    pub cr: f64,
    pub counts: Vec<u64>,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub rr: f64,
    pub cr: f64,
    pub accuracy: Option<f64>,
    pub quality: QualityScores,
}

/// One point of the session trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub index: usize,
    /// Sequence number of the event that produced this entry.
    pub seq: u64,
    pub kind: HistoryKind,
    pub dataset: String,
    pub model: String,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub overall_rr: f64,
    pub overall_cr: f64,
    pub heldout_accuracy: Option<f64>,
    pub quality: QualityScores,
    pub variables: Vec<VariableSummary>,
    pub batch_size: usize,
    pub edit_count: usize,
    pub augmentation: Option<ConstraintSet>,
    pub acknowledged: bool,
    pub drift_flagged: Vec<String>,
    /// Change relative to the previous entry; zero for the baseline.
    pub delta: Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        settings: SessionSettings,
        dataset: String,
        model: String,
        entry: HistoryEntry,
    },
    BatchGenerated {
        batch: String,
    },
    RowEdited {
        entry: EditLogEntry,
    },
    RowRemoved {
        entry: EditLogEntry,
    },
    BatchDiscarded,
    Retrained {
        dataset: String,
        model: String,
        entry: HistoryEntry,
    },
    Reverted {
        entry: HistoryEntry,
    },
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Created { .. } => "created",
            Event::BatchGenerated { .. } => "batch_generated",
            Event::RowEdited { .. } => "row_edited",
            Event::RowRemoved { .. } => "row_removed",
            Event::BatchDiscarded => "batch_discarded",
            Event::Retrained { .. } => "retrained",
            Event::Reverted { .. } => "reverted",
        }
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub event: Event,
    /// Reply returned to the client, replayed for repeated request ids.
    pub response: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendSpec {
    Nn {
        #[serde(default)]
        k: Option<usize>,
    },
    External {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Nn { k: None }
    }
}

impl BackendSpec {
    pub fn build(&self, config: &AugmentConfig) -> Box<dyn GenerationBackend> {
        match self {
            BackendSpec::Nn { k } => Box::new(NearestNeighborBackend {
                k: k.unwrap_or(config.neighbors),
            }),
            BackendSpec::External { program, args } => Box::new(ExternalProcessBackend {
                program: program.clone(),
                args: args.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Generate {
        constraints: ConstraintSet,
        #[serde(default)]
        backend: BackendSpec,
        #[serde(default)]
        seed: u64,
    },
    Edit {
        row_id: RowId,
        variable: String,
        value: String,
    },
    Remove {
        row_id: RowId,
    },
    Discard,
    Retrain {
        acknowledged: bool,
    },
    Revert {
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub generator: GeneratorId,
    pub rows: usize,
    pub first_row_id: Option<RowId>,
    pub warnings: Vec<LowCoverageWarning>,
    pub estimated_accuracy: Option<f64>,
    pub estimated_quality: Option<QualityScores>,
    pub edit_count: usize,
}

impl BatchSummary {
    pub fn of(curated: &CuratedBatch) -> Self {
        let b = &curated.current;
        Self {
            generator: b.generator.clone(),
            rows: b.len(),
            first_row_id: b.rows.first().map(|r| r.row.id),
            warnings: b.warnings.clone(),
            estimated_accuracy: b.estimated_accuracy,
            estimated_quality: b.estimated_quality.as_ref().map(QualityReport::scores),
            edit_count: curated.edit_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Created { entry: HistoryEntry },
    Generated { batch: BatchSummary },
    Edited { what_if: WhatIf },
    Removed { entry: EditLogEntry },
    Discarded,
    Retrained { entry: HistoryEntry },
    Reverted { entry: HistoryEntry },
}

/// Dataset and model at one history entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub dataset: Arc<TabularDataset>,
    pub model: Arc<ModelArtifact>,
    pub dataset_ref: String,
    pub model_ref: String,
}

/// A computed but not yet persisted mutation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub event: Event,
    pub objects: Vec<(String, Object)>,
    pub outcome: Outcome,
}

/// In-memory session state. Only [`Session::apply`] changes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    settings: SessionSettings,
    snapshots: Vec<Snapshot>,
    history: Vec<HistoryEntry>,
    current: Snapshot,
    pending: Option<CuratedBatch>,
    next_seq: u64,
    responses: HashMap<String, Value>,
}

fn summarize(
    index: usize,
    seq: u64,
    kind: HistoryKind,
    snapshot: &Snapshot,
    settings: &SessionSettings,
    previous: Option<&HistoryEntry>,
) -> Result<HistoryEntry, SessionError> {
    let report = bias_report(&snapshot.dataset, &snapshot.model, &settings.bias)?;
    let quality = quality_report(&snapshot.dataset, &settings.quality)?.scores();
    let heldout_accuracy = snapshot.model.heldout_accuracy();
    let delta = match previous {
        Some(p) => Deltas {
            rr: report.overall_rr - p.overall_rr,
            cr: report.overall_cr - p.overall_cr,
            accuracy: heldout_accuracy.zip(p.heldout_accuracy).map(|(a, b)| a - b),
            quality: quality.minus(&p.quality),
        },
        None => Deltas {
            rr: 0.0,
            cr: 0.0,
            accuracy: heldout_accuracy.map(|_| 0.0),
            quality: QualityScores::default(),
        },
    };
    Ok(HistoryEntry {
        index,
        seq,
        kind,
        dataset: snapshot.dataset_ref.clone(),
        model: snapshot.model_ref.clone(),
        train_rows: snapshot.dataset.active_rows().count(),
        heldout_rows: snapshot.dataset.heldout_rows().count(),
        overall_rr: report.overall_rr,
        overall_cr: report.overall_cr,
        heldout_accuracy,
        quality,
        variables: report
            .variables
            .iter()
            .map(|v| VariableSummary {
                variable: v.variable.clone(),
                rr: v.rr,
                cr: v.cr,
                counts: v.segments.iter().map(|s| s.count).collect(),
                rates: v.segments.iter().map(|s| s.representation_rate).collect(),
            })
            .collect(),
        batch_size: 0,
        edit_count: 0,
        augmentation: None,
        acknowledged: false,
        drift_flagged: Vec::new(),
        delta,
    })
}

fn snapshot_of(dataset: TabularDataset, model: ModelArtifact) -> (Snapshot, Vec<(String, Object)>) {
    let d = Object::Dataset(Arc::new(dataset));
    let m = Object::Model(Arc::new(model));
    let (dr, mr) = (object_ref(&d.encode()), object_ref(&m.encode()));
    let (Object::Dataset(dataset), Object::Model(model)) = (d.clone(), m.clone()) else {
        unreachable!()
    };
    (
        Snapshot {
            dataset,
            model,
            dataset_ref: dr.clone(),
            model_ref: mr.clone(),
        },
        vec![(dr, d), (mr, m)],
    )
}

type Resolver<'a> = dyn FnMut(&str, ObjectKind) -> Result<Object, SessionError> + 'a;

impl Session {
    /// Trains the baseline model and computes the creation event.
    pub fn prepare_create(
        dataset: TabularDataset,
        settings: SessionSettings,
    ) -> Result<Prepared, SessionError> {
        if !dataset.is_split() || dataset.heldout_rows().next().is_none() {
            return Err(SessionError::NotSplit);
        }
        let model = ModelArtifact::train(&dataset, &settings.model)?;
        let (snapshot, objects) = snapshot_of(dataset, model);
        let entry = summarize(0, 0, HistoryKind::Baseline, &snapshot, &settings, None)?;
        Ok(Prepared {
            event: Event::Created {
                settings,
                dataset: snapshot.dataset_ref,
                model: snapshot.model_ref,
                entry: entry.clone(),
            },
            objects,
            outcome: Outcome::Created { entry },
        })
    }

    /// Builds a session from its creation record.
    pub fn from_created(
        id: &str,
        record: &EventRecord,
        resolve: &mut Resolver<'_>,
    ) -> Result<Self, SessionError> {
        let Event::Created {
            settings,
            dataset,
            model,
            entry,
        } = &record.event
        else {
            return Err(SessionError::Corrupt(format!(
                "first event is `{}`",
                record.event.name()
            )));
        };
        let current = load_snapshot(dataset, model, resolve)?;
        let mut responses = HashMap::new();
        if let Some(r) = &record.request_id {
            responses.insert(r.clone(), record.response.clone());
        }
        Ok(Self {
            id: id.to_string(),
            settings: settings.clone(),
            snapshots: vec![current.clone()],
            history: vec![entry.clone()],
            current,
            pending: None,
            next_seq: record.seq + 1,
            responses,
        })
    }

    pub fn settings(&self) -> &SessionSettings {
        &self.settings
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn current(&self) -> &Snapshot {
        &self.current
    }

    pub fn dataset(&self) -> &TabularDataset {
        &self.current.dataset
    }

    pub fn model(&self) -> &ModelArtifact {
        &self.current.model
    }

    pub fn snapshot(&self, index: usize) -> Option<&Snapshot> {
        self.snapshots.get(index)
    }

    pub fn pending(&self) -> Option<&CuratedBatch> {
        self.pending.as_ref()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Stored reply of an already applied request.
    pub fn response_for(&self, request_id: &str) -> Option<&Value> {
        self.responses.get(request_id)
    }

    pub fn bias_report(&self) -> Result<BiasReport, SessionError> {
        Ok(bias_report(
            self.dataset(),
            self.model(),
            &self.settings.bias,
        )?)
    }

    pub fn quality_report(&self) -> Result<QualityReport, SessionError> {
        Ok(quality_report(self.dataset(), &self.settings.quality)?)
    }

    pub fn plan(
        &self,
        constraints: &ConstraintSet,
    ) -> Result<Vec<LowCoverageWarning>, SessionError> {
        Ok(augment::plan(
            constraints,
            self.dataset(),
            &self.settings.augment,
        )?)
    }

    /// Dataset that a retrain would produce.
    pub fn merged_dataset(&self) -> Result<TabularDataset, SessionError> {
        let rows = self
            .pending
            .iter()
            .flat_map(|p| p.current.rows.iter())
            .map(|g| {
                let mut row = g.row.clone();
                row.split = SplitTag::Train;
                row
            });
        Ok(self.current.dataset.with_appended(rows)?)
    }

    /// Drift of the would-be merged training set from the baseline.
    pub fn drift_preview(&self) -> Result<DriftReport, SessionError> {
        let merged = self.merged_dataset()?;
        Ok(drift_report(
            &self.snapshots[0].dataset,
            &merged,
            self.settings.drift_threshold,
        )?)
    }

    /// Computes the event for a command without changing state.
    pub fn prepare(&self, command: &Command) -> Result<Prepared, SessionError> {
        let settings = &self.settings;
        match command {
            Command::Generate {
                constraints,
                backend,
                seed,
            } => {
                let backend = backend.build(&settings.augment);
                let batch = augment::generate(
                    constraints,
                    self.dataset(),
                    self.model(),
                    backend.as_ref(),
                    *seed,
                    &settings.augment,
                    &settings.quality,
                )?;
                let object = Object::Batch(Arc::new(batch));
                let reference = object_ref(&object.encode());
                let Object::Batch(batch) = &object else {
                    unreachable!()
                };
                let summary = BatchSummary::of(&CuratedBatch::new(batch.as_ref().clone()));
                Ok(Prepared {
                    event: Event::BatchGenerated {
                        batch: reference.clone(),
                    },
                    objects: vec![(reference, object)],
                    outcome: Outcome::Generated { batch: summary },
                })
            }
            Command::Edit {
                row_id,
                variable,
                value,
            } => {
                let pending = self.pending.as_ref().ok_or(SessionError::NoPendingBatch)?;
                let what_if =
                    pending.what_if(self.dataset(), self.model(), *row_id, variable, value)?;
                Ok(Prepared {
                    event: Event::RowEdited {
                        entry: what_if.entry.clone(),
                    },
                    objects: Vec::new(),
                    outcome: Outcome::Edited { what_if },
                })
            }
            Command::Remove { row_id } => {
                let pending = self.pending.as_ref().ok_or(SessionError::NoPendingBatch)?;
                let entry = pending.removal(*row_id)?;
                Ok(Prepared {
                    event: Event::RowRemoved {
                        entry: entry.clone(),
                    },
                    objects: Vec::new(),
                    outcome: Outcome::Removed { entry },
                })
            }
            Command::Discard => {
                self.pending.as_ref().ok_or(SessionError::NoPendingBatch)?;
                Ok(Prepared {
                    event: Event::BatchDiscarded,
                    objects: Vec::new(),
                    outcome: Outcome::Discarded,
                })
            }
            Command::Retrain { acknowledged } => self.prepare_retrain(*acknowledged),
            Command::Revert { index } => {
                let snapshot = self
                    .snapshots
                    .get(*index)
                    .ok_or(SessionError::UnknownHistoryIndex(*index))?;
                let entry = summarize(
                    self.history.len(),
                    self.next_seq,
                    HistoryKind::Revert { to: *index },
                    snapshot,
                    settings,
                    self.history.last(),
                )?;
                Ok(Prepared {
                    event: Event::Reverted {
                        entry: entry.clone(),
                    },
                    objects: Vec::new(),
                    outcome: Outcome::Reverted { entry },
                })
            }
        }
    }

    fn prepare_retrain(&self, acknowledged: bool) -> Result<Prepared, SessionError> {
        if let Some(p) = &self.pending {
            if p.current.base_snapshot != self.dataset().train_snapshot_hash() {
                return Err(SessionError::StaleBatch);
            }
        }
        let merged = self.merged_dataset()?;
        let drift = drift_report(
            &self.snapshots[0].dataset,
            &merged,
            self.settings.drift_threshold,
        )?;
        if !acknowledged {
            return Err(SessionError::AcknowledgementRequired(Box::new(drift)));
        }
        let before: HashSet<RowId> = self.dataset().heldout_ids().into_iter().collect();
        let after: HashSet<RowId> = merged.heldout_ids().into_iter().collect();
        if before != after {
            return Err(SessionError::LeakageViolation);
        }
        let model = ModelArtifact::train(&merged, &self.settings.model)?;
        let (snapshot, objects) = snapshot_of(merged, model);
        let mut entry = summarize(
            self.history.len(),
            self.next_seq,
            HistoryKind::Retrain,
            &snapshot,
            &self.settings,
            self.history.last(),
        )?;
        entry.batch_size = self.pending.as_ref().map_or(0, |p| p.current.len());
        entry.edit_count = self.pending.as_ref().map_or(0, CuratedBatch::edit_count);
        entry.augmentation = self.pending.as_ref().map(|p| p.current.constraints.clone());
        entry.acknowledged = acknowledged;
        entry.drift_flagged = drift.flagged;
        Ok(Prepared {
            event: Event::Retrained {
                dataset: snapshot.dataset_ref,
                model: snapshot.model_ref,
                entry: entry.clone(),
            },
            objects,
            outcome: Outcome::Retrained { entry },
        })
    }

    /// Applies a persisted record. Records must arrive in sequence order.
    pub fn apply(
        &mut self,
        record: &EventRecord,
        resolve: &mut Resolver<'_>,
    ) -> Result<(), SessionError> {
        if record.seq != self.next_seq {
            return Err(SessionError::Corrupt(format!(
                "expected event {}, found {}",
                self.next_seq, record.seq
            )));
        }
        let dataset = Arc::clone(&self.current.dataset);
        match &record.event {
            Event::Created { .. } => {
                return Err(SessionError::Corrupt("session created twice".into()));
            }
            Event::BatchGenerated { batch } => {
                let Object::Batch(batch) = resolve(batch, ObjectKind::Batch)? else {
                    return Err(SessionError::Corrupt("object kind mismatch".into()));
                };
                self.pending = Some(CuratedBatch::new(batch.as_ref().clone()));
            }
            Event::RowEdited { entry } | Event::RowRemoved { entry } => {
                let pending = self.pending.as_mut().ok_or(SessionError::NoPendingBatch)?;
                pending.commit(entry.clone(), &dataset, &self.settings.quality)?;
            }
            Event::BatchDiscarded => self.pending = None,
            Event::Retrained {
                dataset,
                model,
                entry,
            } => {
                let snapshot = load_snapshot(dataset, model, resolve)?;
                self.push_history(snapshot, entry.clone());
            }
            Event::Reverted { entry } => {
                let HistoryKind::Revert { to } = entry.kind else {
                    return Err(SessionError::Corrupt(
                        "revert entry without a target".into(),
                    ));
                };
                let snapshot = self
                    .snapshots
                    .get(to)
                    .cloned()
                    .ok_or(SessionError::UnknownHistoryIndex(to))?;
                self.push_history(snapshot, entry.clone());
            }
        }
        if let Some(r) = &record.request_id {
            self.responses.insert(r.clone(), record.response.clone());
        }
        self.next_seq += 1;
        Ok(())
    }

    fn push_history(&mut self, snapshot: Snapshot, entry: HistoryEntry) {
        self.pending = None;
        self.current = snapshot.clone();
        self.snapshots.push(snapshot);
        self.history.push(entry);
    }
}

fn load_snapshot(
    dataset: &str,
    model: &str,
    resolve: &mut Resolver<'_>,
) -> Result<Snapshot, SessionError> {
    let (Object::Dataset(d), Object::Model(m)) = (
        resolve(dataset, ObjectKind::Dataset)?,
        resolve(model, ObjectKind::Model)?,
    ) else {
        return Err(SessionError::Corrupt("object kind mismatch".into()));
    };
    Ok(Snapshot {
        dataset: d,
        model: m,
        dataset_ref: dataset.to_string(),
        model_ref: model.to_string(),
    })
}

/// A session bound to its storage. Commands persist before they apply.
pub struct SessionHandle<P: Persistence> {
    session: Session,
    store: P,
    /// Objects written or loaded during this process, by address.
    cache: HashMap<String, Object>,
}

impl<P: Persistence> SessionHandle<P> {
    pub fn create(
        id: &str,
        dataset: TabularDataset,
        settings: SessionSettings,
        mut store: P,
        request_id: Option<String>,
    ) -> Result<(Self, Outcome), SessionError> {
        let prepared = Session::prepare_create(dataset, settings)?;
        let record = persist(&mut store, &prepared, 0, request_id)?;
        let mut cache: HashMap<String, Object> = prepared.objects.into_iter().collect();
        let session = Session::from_created(id, &record, &mut |r, k| {
            resolve_with(&store, &mut cache, r, k)
        })?;
        Ok((
            Self {
                session,
                store,
                cache,
            },
            prepared.outcome,
        ))
    }

    /// Rebuilds a session by replaying its records.
    pub fn open(id: &str, store: P) -> Result<Self, SessionError> {
        let records = store.records()?;
        let first = records
            .first()
            .ok_or_else(|| SessionError::Corrupt("empty event log".into()))?;
        let mut cache = HashMap::new();
        let mut session = Session::from_created(id, first, &mut |r, k| {
            resolve_with(&store, &mut cache, r, k)
        })?;
        for record in &records[1..] {
            session.apply(record, &mut |r, k| resolve_with(&store, &mut cache, r, k))?;
        }
        Ok(Self {
            session,
            store,
            cache,
        })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn store(&self) -> &P {
        &self.store
    }

    /// Runs a command. A repeated `request_id` returns the stored reply
    /// without side effects.
    pub fn execute(
        &mut self,
        command: &Command,
        request_id: Option<String>,
    ) -> Result<Outcome, SessionError> {
        if let Some(value) = request_id
            .as_deref()
            .and_then(|r| self.session.response_for(r))
        {
            return serde_json::from_value(value.clone())
                .map_err(|e| SessionError::Corrupt(e.to_string()));
        }
        let prepared = self.session.prepare(command)?;
        let record = persist(
            &mut self.store,
            &prepared,
            self.session.next_seq(),
            request_id,
        )?;
        self.cache.extend(prepared.objects);
        let (store, cache) = (&self.store, &mut self.cache);
        self.session
            .apply(&record, &mut |r, k| resolve_with(store, cache, r, k))?;
        Ok(prepared.outcome)
    }
}

fn persist<P: Persistence>(
    store: &mut P,
    prepared: &Prepared,
    seq: u64,
    request_id: Option<String>,
) -> Result<EventRecord, SessionError> {
    for (reference, object) in &prepared.objects {
        store.put_object(reference, &object.encode())?;
    }
    let record = EventRecord {
        seq,
        request_id,
        event: prepared.event.clone(),
        response: serde_json::to_value(&prepared.outcome)
            .map_err(|e| SessionError::Corrupt(e.to_string()))?,
    };
    store.append(&record)?;
    Ok(record)
}

fn resolve_with<P: Persistence>(
    store: &P,
    cache: &mut HashMap<String, Object>,
    reference: &str,
    kind: ObjectKind,
) -> Result<Object, SessionError> {
    if let Some(o) = cache.get(reference) {
        return Ok(o.clone());
    }
    let bytes = store.get_object(reference)?;
    if object_ref(&bytes) != reference {
        return Err(SessionError::Corrupt(format!(
            "object {reference} fails its digest"
        )));
    }
    let object = Object::decode(kind, &bytes)?;
    cache.insert(reference.to_string(), object.clone());
    Ok(object)
}

/// Multiset of training-row contents, keyed by row id.
pub fn train_multiset(dataset: &TabularDataset) -> BTreeMap<RowId, String> {
    dataset
        .active_rows()
        .map(|r| {
            (
                r.id,
                serde_json::to_string(&r.cells).expect("cells serialize"),
            )
        })
        .collect()
}
