use serde::{Deserialize, Serialize};

use super::{original_train_rows, AugmentError, ConstraintSet, SegmentConstraint};
use crate::dataset::{Region, Row, TabularDataset};
use crate::metrics::{aggregate_scores, representation_rates_f64, BiasConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutotuneConfig {
    /// Shared per-segment levels. When absent each segment uses
    /// `{0, 1/3, 2/3, 1}` of its deficit to the larger of the variable's
    /// maximum count and the coverage threshold.
    pub levels: Option<Vec<u64>>,
    pub bias: BiasConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedSegment {
    pub variable: String,
    pub segment: String,
    pub count: u64,
    pub added: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutotuneResult {
    pub constraints: ConstraintSet,
    pub segments: Vec<TunedSegment>,
    /// `overall_rr + overall_cr` of the current counts.
    pub objective_before: f64,
    /// The same objective on the hypothetical merged counts.
    pub objective_after: f64,
    pub grid_points: usize,
}

struct Candidate {
    var_pos: usize,
    segment: usize,
    rate: f64,
    /// Share of the segment's pool in every segment of every predictor.
    spread: Vec<Vec<f64>>,
    pool: Vec<usize>,
}

const TIE: f64 = 1e-12;

/// Exhaustive grid search over generation counts for the lowest-rate
/// segments, maximizing `overall_rr + overall_cr` of the expected merged
/// counts. Rows generated for one segment also land in segments of other
/// variables in proportion to that segment's pool.
pub fn naive_autotune(
    dataset: &TabularDataset,
    budget: usize,
    config: &AutotuneConfig,
) -> Result<AutotuneResult, AugmentError> {
    let schema = dataset.schema();
    let predictors = schema.predictor_indices();
    let counts: Vec<Vec<f64>> = predictors
        .iter()
        .map(|&v| {
            dataset
                .segment_counts(v, dataset.active_rows())
                .map(|c| c.into_iter().map(|x| x as f64).collect())
        })
        .collect::<Result<_, _>>()?;
    let train_rows = dataset.active_rows().count();
    let objective = |counts: &[Vec<f64>], added: u64| -> f64 {
        let threshold = config.bias.coverage.resolve(train_rows + added as usize) as f64;
        aggregate_scores(counts, threshold, config.bias.aggregation).map_or(0.0, |(rr, cr)| rr + cr)
    };
    let before = objective(&counts, 0);
    let threshold_now = config.bias.coverage.resolve(train_rows) as f64;

    let originals = original_train_rows(dataset);
    let mut candidates = Vec::new();
    for (pos, &v) in predictors.iter().enumerate() {
        let rates = representation_rates_f64(&counts[pos]).unwrap_or_default();
        let var = schema.variable(v);
        for (s, &rate) in rates.iter().enumerate() {
            if rate >= 1.0 && counts[pos][s] >= threshold_now {
                continue;
            }
            let pool: Vec<usize> = originals
                .iter()
                .enumerate()
                .filter(|(_, r)| var.segment_index(r.cells[v]).ok() == Some(s))
                .map(|(i, _)| i)
                .collect();
            if pool.len() < 2 {
                continue;
            }
            let spread = predictors
                .iter()
                .zip(&counts)
                .map(|(&w, c)| {
                    let mut share = vec![0.0; c.len()];
                    let var_w = schema.variable(w);
                    for &i in &pool {
                        if let Ok(seg) = var_w.segment_index(originals[i].cells[w]) {
                            share[seg] += 1.0 / pool.len() as f64;
                        }
                    }
                    share
                })
                .collect();
            candidates.push(Candidate {
                var_pos: pos,
                segment: s,
                rate,
                spread,
                pool,
            });
        }
    }
    candidates.sort_by(|a, b| a.rate.total_cmp(&b.rate));

    let level_count = config.levels.as_ref().map_or(4, Vec::len).max(1);
    let mut chosen_len = 0;
    let mut points = 1usize;
    while chosen_len < candidates.len() {
        match points.checked_mul(level_count) {
            Some(p) if p <= budget => {
                points = p;
                chosen_len += 1;
            }
            _ => break,
        }
    }
    let mut chosen: Vec<Candidate> = candidates.into_iter().take(chosen_len).collect();
    chosen.sort_by_key(|c| (c.var_pos, c.segment));
    let levels: Vec<Vec<u64>> = chosen
        .iter()
        .map(|c| match &config.levels {
            Some(l) => l.clone(),
            None => {
                let max = counts[c.var_pos].iter().copied().fold(0.0, f64::max);
                let have = counts[c.var_pos][c.segment];
                let deficit = (max - have).max(threshold_now - have).max(0.0);
                [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
                    .iter()
                    .map(|f| (deficit * f).ceil() as u64)
                    .collect()
            }
        })
        .collect();

    let mut best: (f64, u64, Vec<u64>) = (before, 0, vec![0; chosen.len()]);
    let mut index = vec![0usize; chosen.len()];
    let mut evaluated = 0;
    loop {
        let adds: Vec<u64> = index.iter().zip(&levels).map(|(&i, l)| l[i]).collect();
        let total: u64 = adds.iter().sum();
        let mut merged = counts.clone();
        for (c, &add) in chosen.iter().zip(&adds) {
            for (m, share) in merged.iter_mut().zip(&c.spread) {
                for (x, s) in m.iter_mut().zip(share) {
                    *x += add as f64 * s;
                }
            }
        }
        let value = objective(&merged, total);
        evaluated += 1;
        // Lexicographic enumeration: the first point among equals wins the final tie-break.
        if value > best.0 + TIE || ((value - best.0).abs() <= TIE && total < best.1) {
            best = (value, total, adds);
        }
        let Some(pos) = (0..index.len())
            .rev()
            .find(|&p| index[p] + 1 < levels[p].len())
        else {
            break;
        };
        index[pos] += 1;
        for i in &mut index[pos + 1..] {
            *i = 0;
        }
    }

    let mut constraints = Vec::new();
    let mut segments = Vec::new();
    for (c, &add) in chosen.iter().zip(&best.2) {
        let v = predictors[c.var_pos];
        let var = schema.variable(v);
        let seg = &var.segments()[c.segment];
        segments.push(TunedSegment {
            variable: var.name.clone(),
            segment: seg.label.clone(),
            count: counts[c.var_pos][c.segment] as u64,
            added: add,
        });
        if add == 0 {
            continue;
        }
        let add = add as usize;
        constraints.push(match &seg.region {
            Region::Categories { categories } => SegmentConstraint {
                variable: var.name.clone(),
                region: super::ConstraintRegion::Categories(categories.clone()),
                count: add,
            },
            Region::Interval { .. } => {
                let pool: Vec<&Row> = c.pool.iter().map(|&i| originals[i]).collect();
                let values = pool.iter().map(|r| r.cells[v].as_f64());
                let min = values.clone().fold(f64::INFINITY, f64::min);
                let max = values.fold(f64::NEG_INFINITY, f64::max);
                SegmentConstraint::range(&var.name, min, max, add)
            }
        });
    }
    Ok(AutotuneResult {
        constraints: ConstraintSet::independent(constraints),
        segments,
        objective_before: before,
        objective_after: best.0,
        grid_points: evaluated,
    })
}
