use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::dataset::{Cell, Role, VariableSchema};
use crate::metrics::{BiasConfig, CoverageThreshold, RrAggregation};
use crate::model::gbdt::Hyperparameters;

fn schema() -> Schema {
    Schema::new(vec![
        VariableSchema::continuous("age", Role::Predictor)
            .with_bins(&[0.0, 40.0, 60.0, 120.0], None),
        VariableSchema::binary("smoker", Role::Predictor, ["no", "yes"]),
        VariableSchema::continuous("bmi", Role::Predictor),
        VariableSchema::binary("y", Role::Target, ["neg", "pos"]),
    ])
    .unwrap()
}

/// 1,000 rows; smokers are all younger than 60.
fn fixture() -> TabularDataset {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut csv = String::from("age,smoker,bmi,y\n");
    for _ in 0..1000 {
        let age: f64 = rng.random_range(18.0..90.0);
        let smoker = age < 60.0 && rng.random_bool(0.3);
        let bmi: f64 = rng.random_range(16.0..40.0);
        let y = bmi + age / 10.0 > 32.0;
        csv.push_str(&format!(
            "{age},{},{bmi},{}\n",
            if smoker { "yes" } else { "no" },
            if y { "pos" } else { "neg" }
        ));
    }
    TabularDataset::ingest(csv.as_bytes(), schema())
        .unwrap()
        .split(0.2, 1)
        .unwrap()
}

fn small() -> Hyperparameters {
    Hyperparameters {
        trees: 15,
        max_depth: 3,
        ..Hyperparameters::default()
    }
}

fn run(
    set: &ConstraintSet,
    ds: &TabularDataset,
    model: &ModelArtifact,
    seed: u64,
) -> Result<GeneratedBatch, AugmentError> {
    generate(
        set,
        ds,
        model,
        &NearestNeighborBackend::default(),
        seed,
        &AugmentConfig::default(),
        &QualityConfig::default(),
    )
}

#[test]
fn range_constraint_is_honoured() {
    let ds = fixture();
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let set = ConstraintSet::joint(vec![SegmentConstraint::range("age", 60.0, 80.0, 100)]);
    let batch = run(&set, &ds, &model, 3).unwrap();
    assert_eq!(batch.len(), 100);
    assert!(batch
        .rows
        .iter()
        .all(|r| (60.0..=80.0).contains(&r.row.cells[0].as_f64())));
    assert_eq!(batch.rows[0].row.id, ds.next_row_id());
    assert!(batch
        .rows
        .iter()
        .all(|r| r.row.provenance == Provenance::Generated && r.row.split == SplitTag::Train));
    assert_eq!(batch, run(&set, &ds, &model, 3).unwrap());
    assert_ne!(batch.rows, run(&set, &ds, &model, 4).unwrap().rows);
    let agree = batch
        .rows
        .iter()
        .filter(|r| r.prediction.class_index == r.row.cells[3].as_f64() as usize)
        .count();
    assert_eq!(batch.estimated_accuracy, Some(agree as f64 / 100.0));
    assert!(batch.estimated_quality.is_some());
}

#[test]
fn infeasible_joint_region() {
    let ds = fixture();
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let set = ConstraintSet::joint(vec![
        SegmentConstraint::range("age", 60.0, 80.0, 10),
        SegmentConstraint::categories("smoker", &["yes"], 10),
    ]);
    assert_eq!(
        run(&set, &ds, &model, 1),
        Err(AugmentError::InfeasibleJointRegion)
    );
    let single = ConstraintSet::joint(vec![SegmentConstraint::range("age", 200.0, 200.0, 10)]);
    assert!(run(&single, &ds, &model, 1).is_err());
}

#[test]
fn interpolation_stays_between_parents() {
    let ds = fixture();
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let set = ConstraintSet::joint(vec![SegmentConstraint::categories("smoker", &["no"], 50)]);
    let pool = original_train_rows(&ds)
        .into_iter()
        .filter(|r| r.cells[1] == Cell::Category(0))
        .count();
    assert!(pool >= 400, "pool {pool}");
    let batch = run(&set, &ds, &model, 9).unwrap();
    for g in &batch.rows {
        let [a, b] = g.parents[..] else {
            panic!("two parents expected")
        };
        let (a, b) = (&ds.row(a).unwrap().cells, &ds.row(b).unwrap().cells);
        for v in [0, 2] {
            let (lo, hi) = (
                a[v].as_f64().min(b[v].as_f64()),
                a[v].as_f64().max(b[v].as_f64()),
            );
            let x = g.row.cells[v].as_f64();
            assert!(lo <= x && x <= hi, "{x} outside [{lo}, {hi}]");
        }
        for v in [1, 3] {
            assert!(g.row.cells[v] == a[v] || g.row.cells[v] == b[v]);
        }
    }
}

#[test]
fn independent_mode_concatenates() {
    let ds = fixture();
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let set = ConstraintSet::independent(vec![
        SegmentConstraint::range("age", 60.0, 80.0, 7),
        SegmentConstraint::categories("smoker", &["yes"], 5),
    ]);
    let batch = run(&set, &ds, &model, 2).unwrap();
    assert_eq!(batch.len(), 12);
    assert!(batch.rows[..7]
        .iter()
        .all(|r| (60.0..=80.0).contains(&r.row.cells[0].as_f64())));
    assert!(batch.rows[7..]
        .iter()
        .all(|r| r.row.cells[1] == Cell::Category(1)));
}

#[test]
fn stale_model_rejected() {
    let ds = fixture();
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let mut extra = ds.rows()[0].clone();
    extra.id = ds.next_row_id();
    extra.provenance = Provenance::Generated;
    extra.split = SplitTag::Train;
    let grown = ds.with_appended([extra]).unwrap();
    let set = ConstraintSet::joint(vec![SegmentConstraint::range("age", 60.0, 80.0, 1)]);
    assert!(matches!(
        run(&set, &grown, &model, 1),
        Err(AugmentError::Model(ModelError::ModelStale { .. }))
    ));
}

#[test]
fn plan_warnings() {
    let ds = fixture();
    let originals = original_train_rows(&ds);
    let existing = originals
        .iter()
        .filter(|r| r.cells[1] == Cell::Category(1))
        .count();
    let config = AugmentConfig::default();
    let warn = |count| {
        plan(
            &ConstraintSet::joint(vec![SegmentConstraint::categories(
                "smoker",
                &["yes"],
                count,
            )]),
            &ds,
            &config,
        )
        .unwrap()
    };
    assert!(warn(existing).is_empty());
    assert!(warn(existing - 1).is_empty());
    let w = warn(existing + 1);
    assert_eq!(w.len(), 1);
    assert_eq!(
        (w[0].existing_count, w[0].requested_count),
        (existing, existing + 1)
    );
    assert!((w[0].ratio - existing as f64 / (existing + 1) as f64).abs() < 1e-15);
}

#[test]
fn external_backend_output_is_checked() {
    let ds = fixture();
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let set = ConstraintSet::joint(vec![SegmentConstraint::range("age", 60.0, 80.0, 1)]);
    let sh = |script: &str| ExternalProcessBackend {
        program: "sh".into(),
        args: vec!["-c".into(), format!("cat >/dev/null; {script}")],
    };
    let go = |b: &ExternalProcessBackend| {
        generate(
            &set,
            &ds,
            &model,
            b,
            1,
            &AugmentConfig::default(),
            &QualityConfig::default(),
        )
    };
    let ok = go(&sh(
        r#"echo '{"rows":[{"cells":[70.5,0,25.0,1],"parents":[]}]}'"#,
    ))
    .unwrap();
    assert_eq!(ok.rows[0].row.cells[0], Cell::Number(70.5));
    assert_eq!(ok.generator.backend, "external");
    let violating = go(&sh(r#"echo '{"rows":[{"cells":[30.5,0,25.0,1]}]}'"#));
    assert!(matches!(
        violating,
        Err(AugmentError::BackendOutputInvalid(_))
    ));
    let short = go(&sh(r#"echo '{"rows":[]}'"#));
    assert!(matches!(short, Err(AugmentError::BackendOutputInvalid(_))));
    let failing = go(&sh("exit 3"));
    assert!(matches!(failing, Err(AugmentError::Backend(_))));
}

fn severity_dataset(counts: [usize; 3]) -> TabularDataset {
    let schema = Schema::new(vec![
        VariableSchema::categorical("severity", Role::Predictor, &["mild", "moderate", "severe"]),
        VariableSchema::categorical("outcome", Role::Target, &["a", "b", "c"]),
    ])
    .unwrap();
    let mut csv = String::from("severity,outcome\n");
    for ((label, class), n) in [("mild", "a"), ("moderate", "b"), ("severe", "c")]
        .iter()
        .zip(counts)
    {
        for _ in 0..n {
            csv.push_str(&format!("{label},{class}\n"));
        }
    }
    TabularDataset::ingest(csv.as_bytes(), schema).unwrap()
}

fn severity_config() -> AutotuneConfig {
    AutotuneConfig {
        levels: Some(vec![0, 100, 200, 350]),
        bias: BiasConfig {
            coverage: CoverageThreshold::Absolute(200),
            aggregation: RrAggregation::VariableMean,
            ..BiasConfig::default()
        },
    }
}

#[test]
fn severity_grid_matches_exhaustive_enumeration() {
    let result =
        naive_autotune(&severity_dataset([500, 150, 250]), 16, &severity_config()).unwrap();
    // Independent enumeration over the 16 grid points.
    let grid = [0.0, 100.0, 200.0, 350.0];
    let mut best = (f64::MIN, f64::MAX, 0.0, 0.0);
    for &m in &grid {
        for &s in &grid {
            let c = [500.0, 150.0 + m, 250.0 + s];
            let max = c.iter().copied().fold(0.0, f64::max);
            let rr = c.iter().map(|x| x / max).sum::<f64>() / 3.0;
            let cr = c.iter().filter(|&&x| x >= 200.0).count() as f64 / 3.0;
            let obj = rr + cr;
            if obj > best.0 + 1e-12 || ((obj - best.0).abs() <= 1e-12 && m + s < best.1) {
                best = (obj, m + s, m, s);
            }
        }
    }
    assert_eq!((best.2, best.3), (350.0, 200.0));
    assert_eq!(result.grid_points, 16);
    assert_eq!(
        result.segments.iter().map(|s| s.added).collect::<Vec<_>>(),
        vec![350, 200]
    );
    assert!((result.objective_after - best.0).abs() < 1e-12);
    assert_eq!(
        result.constraints,
        ConstraintSet::independent(vec![
            SegmentConstraint::categories("severity", &["moderate"], 350),
            SegmentConstraint::categories("severity", &["severe"], 200),
        ])
    );
}

#[test]
fn balanced_data_needs_nothing() {
    let result =
        naive_autotune(&severity_dataset([300, 300, 300]), 64, &severity_config()).unwrap();
    assert!(result.constraints.is_empty());
    assert_eq!(result.objective_before, 2.0);
}

#[test]
fn default_levels_use_deficits_and_continuous_pools() {
    let ds = fixture();
    let result = naive_autotune(&ds, 64, &AutotuneConfig::default()).unwrap();
    assert!(result.objective_after >= result.objective_before);
    assert_eq!(result.grid_points, 64);
    let model = ModelArtifact::train(&ds, &small()).unwrap();
    let batch = run(&result.constraints, &ds, &model, 5).unwrap();
    assert_eq!(batch.len(), result.constraints.batch_size());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn tuning_never_lowers_the_objective(
        counts in prop::array::uniform3(2usize..400),
        budget in 1usize..100,
        threshold in 1u64..300,
    ) {
        let config = AutotuneConfig {
            levels: None,
            bias: BiasConfig { coverage: CoverageThreshold::Absolute(threshold), ..BiasConfig::default() },
        };
        let r = naive_autotune(&severity_dataset(counts), budget, &config).unwrap();
        prop_assert!(r.objective_after >= r.objective_before);
        prop_assert!(r.grid_points <= budget.max(1));
    }
}
