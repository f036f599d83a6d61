use std::collections::HashMap;
use std::io::Write;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::dataset::{Cell, Row, RowId, Schema, VariableKind};

/// One generation call: draw `count` rows resembling `pool`.
pub struct GenerationRequest<'a> {
    pub schema: &'a Schema,
    pub pool: &'a [&'a Row],
    pub count: usize,
    pub seed: u64,
    /// Stream index, distinct per constraint in independent mode.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRow {
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub parents: Vec<RowId>,
}

pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Vec<SynthRow>, AugmentError>;
}

/// Interpolates between a random pool row and one of its nearest pool
/// neighbours under standardized Euclidean distance over continuous
/// predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestNeighborBackend {
    pub k: usize,
}

impl Default for NearestNeighborBackend {
    fn default() -> Self {
        Self { k: 5 }
    }
}

impl GenerationBackend for NearestNeighborBackend {
    fn name(&self) -> &str {
        "nn"
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Vec<SynthRow>, AugmentError> {
        let pool = req.pool;
        if pool.len() < 2 {
            return Err(AugmentError::NoMatchingRows(pool.len()));
        }
        let schema = req.schema;
        let target = schema.target_index();
        let continuous: Vec<usize> = schema
            .predictor_indices()
            .into_iter()
            .filter(|&v| schema.variable(v).kind == VariableKind::Continuous)
            .collect();
        let scale: Vec<f64> = continuous
            .iter()
            .map(|&v| {
                let n = pool.len() as f64;
                let mean = pool.iter().map(|r| r.cells[v].as_f64()).sum::<f64>() / n;
                let var = pool
                    .iter()
                    .map(|r| (r.cells[v].as_f64() - mean).powi(2))
                    .sum::<f64>()
                    / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let k = self.k.max(1).min(pool.len() - 1);
        let mut neighbours: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(req.stream);

        let mut out = Vec::with_capacity(req.count);
        for _ in 0..req.count {
            let a = rng.random_range(0..pool.len());
            let near = neighbours.entry(a).or_insert_with(|| {
                let mut d: Vec<(f64, usize)> = (0..pool.len())
                    .filter(|&j| j != a)
                    .map(|j| {
                        let dist = continuous
                            .iter()
                            .zip(&scale)
                            .map(|(&v, s)| {
                                ((pool[a].cells[v].as_f64() - pool[j].cells[v].as_f64()) / s)
                                    .powi(2)
                            })
                            .sum::<f64>();
                        (dist, j)
                    })
                    .collect();
                let order =
                    |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
                if k < d.len() {
                    d.select_nth_unstable_by(k, order);
                    d.truncate(k);
                }
                d.sort_by(order);
                d.into_iter().map(|(_, j)| j).collect()
            });
            let b = near[rng.random_range(0..near.len())];
            let t: f64 = rng.random_range(0.0..=1.0);
            let (pa, pb) = (&pool[a].cells, &pool[b].cells);
            let cells = (0..schema.len())
                .map(|v| {
                    if v == target {
                        return if t <= 0.5 { pa[v] } else { pb[v] };
                    }
                    match (pa[v], pb[v]) {
                        (Cell::Number(x), Cell::Number(y)) => {
                            let z = x + t * (y - x);
                            Cell::Number(z.clamp(x.min(y), x.max(y)))
                        }
                        (ca, cb) => {
                            if rng.random_bool(0.5) {
                                ca
                            } else {
                                cb
                            }
                        }
                    }
                })
                .collect();
            out.push(SynthRow {
                cells,
                parents: vec![pool[a].id, pool[b].id],
            });
        }
        Ok(out)
    }
}

/// Delegates to an external program. The program reads one JSON request
/// object on stdin and writes `{"rows": [{"cells": [...], "parents": [...]}]}`
/// on stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalProcessBackend {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    schema: &'a Schema,
    pool: &'a [&'a Row],
    count: usize,
    seed: u64,
    stream: u64,
}

#[derive(Deserialize)]
struct ExternalResponse {
    rows: Vec<SynthRow>,
}

impl GenerationBackend for ExternalProcessBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Vec<SynthRow>, AugmentError> {
        let payload = serde_json::to_vec(&ExternalRequest {
            schema: req.schema,
            pool: req.pool,
            count: req.count,
            seed: req.seed,
            stream: req.stream,
        })
        .map_err(|e| AugmentError::Backend(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| AugmentError::Backend(format!("spawning `{}`: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        // Writer thread: a child that emits output before draining stdin must not deadlock.
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(&payload);
        });
        let output = child
            .wait_with_output()
            .map_err(|e| AugmentError::Backend(e.to_string()))?;
        let _ = writer.join();
        if !output.status.success() {
            return Err(AugmentError::Backend(format!(
                "`{}` exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let response: ExternalResponse = serde_json::from_slice(&output.stdout)
            .map_err(|e| AugmentError::BackendOutputInvalid(e.to_string()))?;
        Ok(response.rows)
    }
}
