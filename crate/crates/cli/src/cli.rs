//! `debias` command-line driver. Every command goes through the same
//! session engine as the HTTP service.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use debias_core::benchmark::{
    self, ratio_sweep, run_baseline, BaselineOutcome, RatioSummary, RATIO_REQUESTS,
};
use debias_core::curation::{DriftReport, Ordering, RowFilter, SortKey};
use debias_core::metrics::BiasReport;
use debias_core::table::{self, ratio};
use debias_core::{
    BackendSpec, Command, Config, ConstraintSet, FsStore, HistoryEntry, MemoryStore, ModelArtifact,
    Outcome, QualityReport, RowId, Schema, SessionError, SessionHandle, TabularDataset,
};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "debias",
    version,
    about = "Representation-bias analysis, constrained augmentation and retraining"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "DEBIAS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Session to operate on.
    #[arg(long, global = true, default_value = "default")]
    pub session: String,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Load a CSV, split it and train the baseline model into a new session.
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Held-out fraction.
        #[arg(long, default_value_t = 0.2)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bias, quality or per-segment report of the current snapshot.
    Report(ReportArgs),
    /// Low-coverage warnings for a constraint file, without generating.
    Plan {
        #[arg(long)]
        constraints: PathBuf,
    },
    /// Generate a batch from a constraint file.
    Augment {
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendKind::Nn)]
        backend: BackendKind,
        /// Program run by the external backend.
        #[arg(long, required_if_eq("backend", "external"))]
        program: Option<String>,
        /// Arguments for the external program.
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Show the pending generated batch.
    Generated {
        /// Row filter as JSON.
        #[arg(long)]
        filter: Option<String>,
        /// `row_id`, `confidence`, `predicted` or a variable name.
        #[arg(long)]
        sort: Option<String>,
        #[arg(long)]
        desc: bool,
    },
    /// Preview a cell change without committing it.
    WhatIf {
        #[arg(long)]
        row: u64,
        #[arg(long)]
        variable: String,
        #[arg(long)]
        value: String,
    },
    /// Commit a cell change to the pending batch.
    Edit {
        #[arg(long)]
        row: u64,
        #[arg(long)]
        variable: String,
        #[arg(long)]
        value: String,
    },
    /// Remove a row from the pending batch.
    Remove {
        #[arg(long)]
        row: u64,
    },
    /// Drop the pending batch.
    Discard,
    /// Drift of the would-be merged training set from the original.
    Drift,
    /// Merge the pending batch and retrain.
    Retrain {
        /// Acknowledge the drift report.
        #[arg(long)]
        ack: bool,
    },
    /// Restore the snapshot of a history entry.
    Revert {
        #[arg(long)]
        index: usize,
    },
    /// List history entries.
    History,
    /// Grid-search constraints, generate them, retrain, and compare.
    Baseline {
        #[arg(long, default_value_t = 256)]
        budget: usize,
        /// Shared per-segment levels, comma separated.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run on the built-in synthetic benchmark in memory instead of the session.
        #[arg(long)]
        synthetic: bool,
    },
    /// Estimated accuracy of generated batches against existing/requested ratio.
    RatioBench {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Request sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        requests: Option<Vec<usize>>,
        /// Use the session's current snapshot instead of the synthetic benchmark.
        #[arg(long)]
        use_session: bool,
    },
    /// Write the synthetic benchmark CSV and schema.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<std::net::IpAddr>,
    },
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct ReportArgs {
    #[arg(long)]
    pub bias: bool,
    #[arg(long)]
    pub quality: bool,
    /// Per-segment detail of one variable.
    #[arg(long, value_name = "VARIABLE")]
    pub segments: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Nn,
    External,
}

struct Ctx {
    config: Config,
    session: String,
    json: bool,
    out: Box<dyn Write>,
}

impl Ctx {
    fn emit<T: Serialize>(&mut self, value: &T, text: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            serde_json::to_writer_pretty(&mut self.out, value)?;
            writeln!(self.out)?;
        } else {
            write!(self.out, "{}", text())?;
        }
        Ok(())
    }

    fn open(&self) -> Result<SessionHandle<FsStore>> {
        if !FsStore::exists(&self.config.data_dir, &self.session) {
            bail!(
                "no session `{}` in {}; run `debias ingest` first",
                self.session,
                self.config.data_dir.display()
            );
        }
        let store = FsStore::open(&self.config.data_dir, &self.session)?;
        Ok(SessionHandle::open(&self.session, store)?)
    }
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

fn read_constraints(path: &Path) -> Result<ConstraintSet> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing constraints in {}", path.display()))
}

fn entry_rows(entries: &[HistoryEntry]) -> String {
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                e.index.to_string(),
                match &e.kind {
                    debias_core::session::HistoryKind::Baseline => "baseline".to_string(),
                    debias_core::session::HistoryKind::Retrain => "retrain".to_string(),
                    debias_core::session::HistoryKind::Revert { to } => format!("revert->{to}"),
                },
                e.train_rows.to_string(),
                e.batch_size.to_string(),
                e.edit_count.to_string(),
                ratio(e.overall_rr),
                signed(e.delta.rr),
                ratio(e.overall_cr),
                signed(e.delta.cr),
                table::opt_ratio(e.heldout_accuracy),
                e.delta.accuracy.map_or("-".into(), signed),
                ratio(e.quality.overall),
            ]
        })
        .collect();
    table::render(
        &[
            "#", "kind", "train", "batch", "edits", "rr", "d_rr", "cr", "d_cr", "accuracy",
            "d_acc", "quality",
        ],
        &rows,
    )
}

/// Shortens long decimals for table display.
fn short_number(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(x) if v.contains('.') && v.len() > 8 => format!("{x:.2}"),
        _ => v.to_string(),
    }
}

fn signed(x: f64) -> String {
    // Avoid printing "-0.00".
    let x = if x.abs() < 0.005 { 0.0 } else { x };
    format!("{x:+.2}")
}

fn quality_text(q: &QualityReport) -> String {
    let rows: Vec<Vec<String>> = q
        .percentages()
        .iter()
        .map(|(name, pct)| vec![name.to_string(), format!("{pct:.1}%")])
        .collect();
    table::render(&["issue", "severity"], &rows)
}

fn drift_text(d: &DriftReport) -> String {
    let rows: Vec<Vec<String>> = d
        .variables
        .iter()
        .map(|v| {
            vec![
                v.variable.clone(),
                format!("{:.4}", v.score),
                if v.flagged { "yes" } else { "no" }.to_string(),
            ]
        })
        .collect();
    format!(
        "drift threshold {}\n{}",
        d.threshold,
        table::render(&["variable", "tv_distance", "flagged"], &rows)
    )
}

fn segments_text(report: &BiasReport, name: &str) -> Result<String> {
    let v = report
        .variable(name)
        .ok_or_else(|| anyhow!("no predictor `{name}`"))?;
    let classes: Vec<String> = v
        .segments
        .first()
        .map(|s| {
            s.accuracy_by_outcome
                .iter()
                .map(|o| o.class.clone())
                .collect()
        })
        .unwrap_or_default();
    let mut headers = vec!["segment", "count", "rate", "covered", "accuracy"];
    let class_headers: Vec<String> = classes.iter().map(|c| format!("acc[{c}]")).collect();
    headers.extend(class_headers.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = v
        .segments
        .iter()
        .map(|s| {
            let mut row = vec![
                s.segment.label.clone(),
                s.count.to_string(),
                ratio(s.representation_rate),
                if s.covered { "yes" } else { "no" }.to_string(),
                table::opt_ratio(s.accuracy.accuracy),
            ];
            row.extend(
                s.accuracy_by_outcome
                    .iter()
                    .map(|o| table::opt_ratio(o.cell.accuracy)),
            );
            row
        })
        .collect();
    Ok(format!(
        "{name}: rr {} cr {} (coverage threshold {})\n{}",
        ratio(v.rr),
        ratio(v.cr),
        report.coverage_threshold,
        table::render(&headers, &rows)
    ))
}

fn baseline_text(b: &BaselineOutcome) -> String {
    let rows = vec![
        vec!["overall_rr".into(), ratio(b.rr_before), ratio(b.rr_after)],
        vec!["overall_cr".into(), ratio(b.cr_before), ratio(b.cr_after)],
        vec![
            "heldout_accuracy".into(),
            table::opt_ratio(b.accuracy_before),
            table::opt_ratio(b.accuracy_after),
        ],
    ];
    let segs: Vec<Vec<String>> = b
        .tuning
        .segments
        .iter()
        .map(|s| {
            vec![
                s.variable.clone(),
                s.segment.clone(),
                s.count.to_string(),
                s.added.to_string(),
            ]
        })
        .collect();
    format!(
        "grid points {}, generated rows {}\n{}\n{}",
        b.tuning.grid_points,
        b.generated_rows,
        table::render(&["segment_variable", "segment", "count", "added"], &segs),
        table::render(&["metric", "before", "after"], &rows)
    )
}

/// (variable, segment, requested)
type RatioKey = (String, String, usize);
/// (existing, log ratio, accuracy sum, seeds)
type RatioAcc = (usize, f64, f64, usize);

fn ratio_text(summary: &RatioSummary) -> String {
    // Mean over seeds per (variable, segment, requested).
    let mut groups: BTreeMap<RatioKey, RatioAcc> = BTreeMap::new();
    for p in &summary.points {
        let g = groups
            .entry((p.variable.clone(), p.segment.clone(), p.requested))
            .or_insert((p.existing, p.log_ratio, 0.0, 0));
        g.2 += p.estimated_accuracy;
        g.3 += 1;
    }
    let mut rows: Vec<(f64, Vec<String>)> = groups
        .into_iter()
        .map(
            |((variable, segment, requested), (existing, log_ratio, sum, n))| {
                (
                    log_ratio,
                    vec![
                        format!("{log_ratio:.3}"),
                        format!("{:.4}", sum / n as f64),
                        variable,
                        segment,
                        existing.to_string(),
                        requested.to_string(),
                    ],
                )
            },
        )
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rows: Vec<Vec<String>> = rows.into_iter().map(|(_, r)| r).collect();
    format!(
        "{}\nmean estimated accuracy, ratio < 1: {}\nmean estimated accuracy, ratio >= 1: {}\n",
        table::render(
            &[
                "log_ratio",
                "est_accuracy",
                "variable",
                "segment",
                "existing",
                "requested"
            ],
            &rows
        ),
        table::opt_ratio(summary.mean_below_one),
        table::opt_ratio(summary.mean_at_or_above_one),
    )
}

fn outcome_text(outcome: &Outcome) -> String {
    match outcome {
        Outcome::Created { entry } | Outcome::Retrained { entry } | Outcome::Reverted { entry } => {
            entry_rows(std::slice::from_ref(entry))
        }
        Outcome::Generated { batch } => {
            let mut s = format!(
                "generated {} rows (first id {}), estimated accuracy {}\n",
                batch.rows,
                batch.first_row_id.map_or("-".into(), |r| r.to_string()),
                table::opt_ratio(batch.estimated_accuracy)
            );
            for w in &batch.warnings {
                s.push_str(&format!(
                    "warning: `{}` has {} matching rows for {} requested (ratio {:.2})\n",
                    w.constraint.variable, w.existing_count, w.requested_count, w.ratio
                ));
            }
            s
        }
        Outcome::Edited { what_if } => format!(
            "row {}: {} ({:.3}) -> {} ({:.3})\n",
            what_if.entry.row_id,
            what_if.previous.predicted_class,
            what_if.previous.confidence,
            what_if.prediction.predicted_class,
            what_if.prediction.confidence
        ),
        Outcome::Removed { entry } => format!("removed row {}\n", entry.row_id),
        Outcome::Discarded => "discarded pending batch\n".into(),
    }
}

/// Runs one command. `out` receives normal output.
pub fn run(cli: Cli, out: Box<dyn Write>) -> Result<()> {
    let config = load_config(&cli)?;
    let mut ctx = Ctx {
        config,
        session: cli.session.clone(),
        json: cli.json,
        out,
    };
    match cli.command {
        Cmd::Ingest {
            csv,
            schema,
            split,
            seed,
        } => {
            if FsStore::exists(&ctx.config.data_dir, &ctx.session) {
                bail!("session `{}` already exists", ctx.session);
            }
            let schema_bytes =
                std::fs::read(&schema).with_context(|| format!("reading {}", schema.display()))?;
            let schema = Schema::from_json(&schema_bytes)?;
            let csv_bytes =
                std::fs::read(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let dataset = TabularDataset::ingest(&csv_bytes, schema)?.split(split, seed)?;
            let store = FsStore::open(&ctx.config.data_dir, &ctx.session)?;
            let (_, outcome) = SessionHandle::create(
                &ctx.session,
                dataset,
                ctx.config.session.clone(),
                store,
                None,
            )?;
            ctx.emit(&outcome, || outcome_text(&outcome))
        }
        Cmd::Report(args) => {
            let h = ctx.open()?;
            let s = h.session();
            if args.quality {
                let q = s.quality_report()?;
                ctx.emit(&q, || quality_text(&q))
            } else if let Some(name) = args.segments {
                let report = s.bias_report()?;
                let v = report
                    .variable(&name)
                    .cloned()
                    .ok_or_else(|| anyhow!("no predictor `{name}`"))?;
                let text = segments_text(&report, &name)?;
                ctx.emit(&v, || text)
            } else {
                let report = s.bias_report()?;
                ctx.emit(&report, || report.to_table())
            }
        }
        Cmd::Plan { constraints } => {
            let set = read_constraints(&constraints)?;
            let h = ctx.open()?;
            let warnings = h.session().plan(&set)?;
            ctx.emit(&warnings, || {
                let mut s = format!("batch size {}\n", set.batch_size());
                for w in &warnings {
                    s.push_str(&format!(
                        "warning: `{}` has {} matching rows for {} requested (ratio {:.2})\n",
                        w.constraint.variable, w.existing_count, w.requested_count, w.ratio
                    ));
                }
                s
            })
        }
        Cmd::Augment {
            constraints,
            backend,
            program,
            args,
            seed,
        } => {
            let set = read_constraints(&constraints)?;
            let backend = match backend {
                BackendKind::Nn => BackendSpec::default(),
                BackendKind::External => BackendSpec::External {
                    program: program
                        .ok_or_else(|| anyhow!("--program is required for the external backend"))?,
                    args,
                },
            };
            let mut h = ctx.open()?;
            let outcome = h.execute(
                &Command::Generate {
                    constraints: set,
                    backend,
                    seed,
                },
                None,
            )?;
            ctx.emit(&outcome, || outcome_text(&outcome))
        }
        Cmd::Generated { filter, sort, desc } => {
            let filter: RowFilter = match filter {
                Some(f) => serde_json::from_str(&f).context("parsing --filter")?,
                None => RowFilter::All,
            };
            let ordering = sort.map(|key| Ordering {
                key: match key.as_str() {
                    "row_id" => SortKey::RowId,
                    "confidence" => SortKey::Confidence,
                    "predicted" => SortKey::Predicted,
                    _ => SortKey::Variable(key),
                },
                descending: desc,
            });
            let h = ctx.open()?;
            let s = h.session();
            let pending = s.pending().ok_or(SessionError::NoPendingBatch)?;
            let view = crate::views::batch_view(s.dataset(), pending, &filter, ordering.as_ref())
                .map_err(SessionError::from)?;
            ctx.emit(&view, || {
                let mut headers: Vec<&str> = vec!["row_id", "provenance"];
                headers.extend(view.columns.iter().map(String::as_str));
                headers.extend(["predicted", "confidence"]);
                let rows: Vec<Vec<String>> = view
                    .rows
                    .iter()
                    .map(|r| {
                        let mut row = vec![
                            r.row_id.to_string(),
                            format!("{:?}", r.provenance).to_lowercase(),
                        ];
                        row.extend(r.values.iter().map(|v| short_number(v)));
                        row.push(r.prediction.predicted_class.clone());
                        row.push(format!("{:.3}", r.prediction.confidence));
                        row
                    })
                    .collect();
                format!(
                    "{} of {} rows, {} edits, estimated accuracy {}\n{}",
                    view.rows.len(),
                    view.total,
                    view.edit_count,
                    table::opt_ratio(view.estimated_accuracy),
                    table::render(&headers, &rows)
                )
            })
        }
        Cmd::WhatIf {
            row,
            variable,
            value,
        } => {
            let h = ctx.open()?;
            let s = h.session();
            let pending = s.pending().ok_or(SessionError::NoPendingBatch)?;
            let w = pending
                .what_if(s.dataset(), s.model(), RowId(row), &variable, &value)
                .map_err(SessionError::from)?;
            let outcome = Outcome::Edited { what_if: w.clone() };
            ctx.emit(&w, || outcome_text(&outcome))
        }
        Cmd::Edit {
            row,
            variable,
            value,
        } => {
            let mut h = ctx.open()?;
            let outcome = h.execute(
                &Command::Edit {
                    row_id: RowId(row),
                    variable,
                    value,
                },
                None,
            )?;
            ctx.emit(&outcome, || outcome_text(&outcome))
        }
        Cmd::Remove { row } => {
            let mut h = ctx.open()?;
            let outcome = h.execute(&Command::Remove { row_id: RowId(row) }, None)?;
            ctx.emit(&outcome, || outcome_text(&outcome))
        }
        Cmd::Discard => {
            let mut h = ctx.open()?;
            let outcome = h.execute(&Command::Discard, None)?;
            ctx.emit(&outcome, || outcome_text(&outcome))
        }
        Cmd::Drift => {
            let h = ctx.open()?;
            let d = h.session().drift_preview()?;
            ctx.emit(&d, || drift_text(&d))
        }
        Cmd::Retrain { ack } => {
            let mut h = ctx.open()?;
            match h.execute(&Command::Retrain { acknowledged: ack }, None) {
                Err(SessionError::AcknowledgementRequired(drift)) => {
                    ctx.emit(&drift, || drift_text(&drift))?;
                    bail!("retraining needs acknowledgement of the drift report; rerun with --ack")
                }
                other => {
                    let outcome = other?;
                    ctx.emit(&outcome, || outcome_text(&outcome))
                }
            }
        }
        Cmd::Revert { index } => {
            let mut h = ctx.open()?;
            let outcome = h.execute(&Command::Revert { index }, None)?;
            ctx.emit(&outcome, || outcome_text(&outcome))
        }
        Cmd::History => {
            let h = ctx.open()?;
            let entries = h.session().history().to_vec();
            ctx.emit(&entries, || entry_rows(&entries))
        }
        Cmd::Baseline {
            budget,
            levels,
            seed,
            synthetic,
        } => {
            let outcome = if synthetic {
                let (mut h, _) = SessionHandle::create(
                    "synthetic",
                    benchmark::synthetic_benchmark(),
                    ctx.config.session.clone(),
                    MemoryStore::default(),
                    None,
                )?;
                run_baseline(&mut h, budget, levels, seed)?
            } else {
                let mut h = ctx.open()?;
                run_baseline(&mut h, budget, levels, seed)?
            };
            ctx.emit(&outcome, || baseline_text(&outcome))
        }
        Cmd::RatioBench {
            seeds,
            requests,
            use_session,
        } => {
            let requests = requests.unwrap_or_else(|| RATIO_REQUESTS.to_vec());
            let summary = if use_session {
                let h = ctx.open()?;
                let s = h.session();
                ratio_sweep(
                    s.dataset(),
                    s.model(),
                    0..seeds,
                    &requests,
                    &s.settings().augment,
                )?
            } else {
                let ds = benchmark::synthetic_benchmark();
                let model = ModelArtifact::train(&ds, &ctx.config.session.model)?;
                ratio_sweep(
                    &ds,
                    &model,
                    0..seeds,
                    &requests,
                    &ctx.config.session.augment,
                )?
            };
            ctx.emit(&summary, || ratio_text(&summary))
        }
        Cmd::Synth { out_dir } => {
            std::fs::create_dir_all(&out_dir)?;
            let csv = out_dir.join("benchmark.csv");
            let schema = out_dir.join("benchmark.schema.json");
            std::fs::write(
                &csv,
                benchmark::benchmark_csv(benchmark::BENCHMARK_ROWS, benchmark::BENCHMARK_SEED),
            )?;
            std::fs::write(
                &schema,
                serde_json::to_vec_pretty(&benchmark::benchmark_schema())?,
            )?;
            let written = [csv, schema];
            ctx.emit(&written, || {
                written
                    .iter()
                    .map(|p| format!("wrote {}\n", p.display()))
                    .collect()
            })
        }
        Cmd::Serve { port, bind } => {
            if let Some(p) = port {
                ctx.config.server.port = p;
            }
            if let Some(b) = bind {
                ctx.config.server.bind = b;
            }
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            runtime.block_on(crate::server::serve(ctx.config))
        }
    }
}
