//! Fixed synthetic benchmark and the experiments run on it.
//!
//! The benchmark has dense and sparse segments; labels in the sparse ones
//! are noisier, so rows generated from small pools are harder to predict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    self, naive_autotune, original_train_rows, AugmentConfig, AugmentError, AutotuneConfig,
    AutotuneResult, ConstraintRegion, ConstraintSet, NearestNeighborBackend, SegmentConstraint,
};
use crate::dataset::{Region, Role, Schema, TabularDataset, VariableSchema};
use crate::model::ModelArtifact;
use crate::quality::QualityConfig;
use crate::session::{BackendSpec, Command, Outcome, Persistence, SessionError, SessionHandle};

pub const BENCHMARK_ROWS: usize = 3000;
pub const BENCHMARK_SEED: u64 = 20_240_611;

pub fn benchmark_schema() -> Schema {
    Schema::new(vec![
        VariableSchema::continuous("age", Role::Predictor).with_bins(
            &[18.0, 35.0, 50.0, 65.0, 90.0],
            Some(&["18-35", "35-50", "50-65", "65-90"]),
        ),
        VariableSchema::continuous("bmi", Role::Predictor).with_bins(
            &[14.0, 18.5, 25.0, 30.0, 50.0],
            Some(&["under", "normal", "over", "obese"]),
        ),
        VariableSchema::binary("sex", Role::Predictor, ["female", "male"]),
        VariableSchema::categorical(
            "region",
            Role::Predictor,
            &["urban", "suburban", "rural", "remote"],
        ),
        VariableSchema::binary("outcome", Role::Target, ["negative", "positive"]),
    ])
    .expect("benchmark schema is valid")
}

/// Benchmark rows as CSV.
pub fn benchmark_csv(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("age,bmi,sex,region,outcome\n");
    for _ in 0..rows {
        let age: f64 = if rng.random_bool(0.08) {
            rng.random_range(65.0..90.0)
        } else {
            rng.random_range(18.0..65.0)
        };
        let bmi: f64 = if rng.random_bool(0.05) {
            rng.random_range(15.0..18.5)
        } else {
            rng.random_range(18.5..45.0)
        };
        let male = rng.random_bool(0.5);
        let region = match rng.random_range(0.0..1.0) {
            u if u < 0.55 => 0,
            u if u < 0.85 => 1,
            u if u < 0.99 => 2,
            _ => 3,
        };
        let score = 0.09 * (age - 45.0)
            + 0.3 * (bmi - 28.0)
            + if male { 0.4 } else { -0.4 }
            + if region == 2 { 0.5 } else { 0.0 };
        let mut positive = score > 0.0;
        let sparse = age >= 65.0 || bmi < 18.5 || region == 3;
        if rng.random_bool(if sparse { 0.3 } else { 0.04 }) {
            positive = !positive;
        }
        csv.push_str(&format!(
            "{age:.2},{bmi:.2},{},{},{}\n",
            if male { "male" } else { "female" },
            ["urban", "suburban", "rural", "remote"][region],
            if positive { "positive" } else { "negative" }
        ));
    }
    csv
}

/// The benchmark dataset, split 80/20.
pub fn synthetic_benchmark() -> TabularDataset {
    TabularDataset::ingest(
        benchmark_csv(BENCHMARK_ROWS, BENCHMARK_SEED).as_bytes(),
        benchmark_schema(),
    )
    .and_then(|d| d.split(0.2, BENCHMARK_SEED))
    .expect("benchmark dataset is valid")
}

/// One generated batch in the ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub seed: u64,
    pub variable: String,
    pub segment: String,
    pub existing: usize,
    pub requested: usize,
    /// `existing / requested`.
    pub ratio: f64,
    pub log_ratio: f64,
    pub estimated_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub points: Vec<RatioPoint>,
    pub mean_below_one: Option<f64>,
    pub mean_at_or_above_one: Option<f64>,
}

pub const RATIO_REQUESTS: [usize; 4] = [25, 50, 100, 200];

/// Generates one batch per (seed, predictor segment, request size) and
/// records the existing/requested ratio with the batch's estimated accuracy.
pub fn ratio_sweep(
    dataset: &TabularDataset,
    model: &ModelArtifact,
    seeds: impl IntoIterator<Item = u64>,
    requests: &[usize],
    config: &AugmentConfig,
) -> Result<RatioSummary, AugmentError> {
    let schema = dataset.schema();
    let backend = NearestNeighborBackend {
        k: config.neighbors,
    };
    let quality = QualityConfig::default();
    let originals = original_train_rows(dataset);
    let mut targets = Vec::new();
    for v in schema.predictor_indices() {
        let var = schema.variable(v);
        for (s, segment) in var.segments().into_iter().enumerate() {
            let pool: Vec<f64> = originals
                .iter()
                .filter(|r| var.segment_index(r.cells[v]).ok() == Some(s))
                .map(|r| r.cells[v].as_f64())
                .collect();
            if pool.len() < 2 {
                continue;
            }
            let existing = pool.len();
            // Closed ranges over the pool's extent select exactly the segment's rows.
            let region = match &segment.region {
                Region::Categories { categories } => {
                    ConstraintRegion::Categories(categories.clone())
                }
                Region::Interval { .. } => ConstraintRegion::Range {
                    min: pool.iter().copied().fold(f64::INFINITY, f64::min),
                    max: pool.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                },
            };
            targets.push((var.name.clone(), segment.label.clone(), region, existing));
        }
    }
    let mut points = Vec::new();
    for seed in seeds {
        for (variable, segment, region, existing) in &targets {
            for &requested in requests.iter().filter(|&&r| r <= config.cap) {
                let set = ConstraintSet::joint(vec![SegmentConstraint {
                    variable: variable.clone(),
                    region: region.clone(),
                    count: requested,
                }]);
                let batch =
                    augment::generate(&set, dataset, model, &backend, seed, config, &quality)?;
                let ratio = *existing as f64 / requested as f64;
                points.push(RatioPoint {
                    seed,
                    variable: variable.clone(),
                    segment: segment.clone(),
                    existing: *existing,
                    requested,
                    ratio,
                    log_ratio: ratio.ln(),
                    estimated_accuracy: batch.estimated_accuracy.unwrap_or(0.0),
                });
            }
        }
    }
    let mean = |below: bool| {
        let v: Vec<f64> = points
            .iter()
            .filter(|p| (p.ratio < 1.0) == below)
            .map(|p| p.estimated_accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(RatioSummary {
        mean_below_one: mean(true),
        mean_at_or_above_one: mean(false),
        points,
    })
}

/// Before/after numbers of one baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub tuning: AutotuneResult,
    pub generated_rows: usize,
    pub rr_before: f64,
    pub rr_after: f64,
    pub cr_before: f64,
    pub cr_after: f64,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
}

/// Tunes constraints on the session's current training set, generates them
/// with the default backend, and retrains with acknowledgement.
pub fn run_baseline<P: Persistence>(
    handle: &mut SessionHandle<P>,
    budget: usize,
    levels: Option<Vec<u64>>,
    seed: u64,
) -> Result<BaselineOutcome, SessionError> {
    let before = handle
        .session()
        .history()
        .last()
        .cloned()
        .expect("history has a baseline");
    let config = AutotuneConfig {
        levels,
        bias: handle.session().settings().bias.clone(),
    };
    let tuning = naive_autotune(handle.session().dataset(), budget, &config)?;
    let mut generated_rows = 0;
    if !tuning.constraints.is_empty() {
        let command = Command::Generate {
            constraints: tuning.constraints.clone(),
            backend: BackendSpec::default(),
            seed,
        };
        if let Outcome::Generated { batch } = handle.execute(&command, None)? {
            generated_rows = batch.rows;
        }
    }
    let Outcome::Retrained { entry } =
        handle.execute(&Command::Retrain { acknowledged: true }, None)?
    else {
        unreachable!("retrain yields a history entry")
    };
    Ok(BaselineOutcome {
        tuning,
        generated_rows,
        rr_before: before.overall_rr,
        rr_after: entry.overall_rr,
        cr_before: before.overall_cr,
        cr_after: entry.overall_cr,
        accuracy_before: before.heldout_accuracy,
        accuracy_after: entry.heldout_accuracy,
    })
}
