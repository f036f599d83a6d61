//! Shared inputs for the engine benchmarks.

use debias_core::model::Hyperparameters;
use debias_core::{ConstraintSet, ModelArtifact, SegmentConstraint, TabularDataset};

pub use debias_core::benchmark::synthetic_benchmark;

/// The synthetic benchmark with a model trained on it.
pub fn trained(params: &Hyperparameters) -> (TabularDataset, ModelArtifact) {
    let dataset = synthetic_benchmark();
    let model = ModelArtifact::train(&dataset, params).expect("benchmark trains");
    (dataset, model)
}

/// Joint request for `count` older rural rows.
pub fn sparse_request(count: usize) -> ConstraintSet {
    ConstraintSet::joint(vec![
        SegmentConstraint::range("age", 50.0, 89.0, count),
        SegmentConstraint::categories("region", &["rural", "remote"], count),
    ])
}
