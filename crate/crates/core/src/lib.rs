//! Engine for detecting representation bias in tabular training data,
//! steering constrained synthetic-data generation, curating the generated
//! rows, and retraining the prediction model under a revertible history.

pub mod augment;
pub mod benchmark;
pub mod config;
pub mod curation;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod quality;
pub mod session;
pub mod store;
pub mod table;

pub use augment::{AugmentConfig, AugmentError, ConstraintSet, GeneratedBatch, SegmentConstraint};
pub use config::{Config, ConfigError};
pub use curation::{CurationError, DriftReport, RowFilter};
pub use dataset::{
    Cell, DatasetError, Provenance, Region, Role, Row, RowId, Schema, Segment, Segmentation,
    SplitTag, TabularDataset, VariableGroup, VariableKind, VariableSchema,
};
pub use metrics::{BiasConfig, BiasReport, CoverageThreshold, MetricsError, RrAggregation};
pub use model::{ModelArtifact, ModelError, Prediction};
pub use quality::{QualityConfig, QualityError, QualityReport};
pub use session::{
    BackendSpec, Command, HistoryEntry, MemoryStore, Outcome, Session, SessionError, SessionHandle,
    SessionSettings,
};
pub use store::FsStore;
