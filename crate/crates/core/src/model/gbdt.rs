//! Histogram-based gradient-boosted decision trees for classification.
//!
//! Binary targets use a single logistic score; three or more classes use one
//! tree per class per round with a softmax link. Trees grow depth-wise with
//! Newton leaf values `-G / (H + lambda)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub l2_regularization: f64,
    pub max_bins: usize,
    /// Row fraction sampled per round; 1.0 disables sampling.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            l2_regularization: 1.0,
            max_bins: 64,
            subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// A fitted ensemble. `rounds[r][k]` is the tree for score `k` in round `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtEnsemble {
    pub n_classes: usize,
    pub n_features: usize,
    pub base_scores: Vec<f64>,
    pub rounds: Vec<Vec<Tree>>,
}

/// Something that maps a feature vector to class probabilities.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Vec<f64>;
}

impl Classifier for GbdtEnsemble {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut scores = self.base_scores.clone();
        for round in &self.rounds {
            for (s, tree) in scores.iter_mut().zip(round) {
                *s += tree.predict(x);
            }
        }
        link(&scores, self.n_classes)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn link(scores: &[f64], n_classes: usize) -> Vec<f64> {
    if n_classes == 2 {
        let p = sigmoid(scores[0]);
        vec![1.0 - p, p]
    } else {
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }
}

/// Quantile cut points per feature. A value `x` falls in bin `#{cuts < x}`.
fn cut_points(values: &mut [f64], max_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = values.to_vec();
    uniq.dedup();
    if uniq.len() <= 1 {
        return Vec::new();
    }
    if uniq.len() <= max_bins {
        return uniq.windows(2).map(|w| midpoint(w[0], w[1])).collect();
    }
    let n = values.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(max_bins);
    for j in 1..max_bins {
        let v = values[j * n / max_bins];
        // Cut between v and the next distinct value above it.
        let next = uniq.partition_point(|u| *u <= v);
        if next < uniq.len() {
            let c = midpoint(v, uniq[next]);
            if cuts.last().is_none_or(|l| c > *l) {
                cuts.push(c);
            }
        }
    }
    cuts
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // Keep the cut strictly below b so `x <= cut` separates a from b.
    if m >= b {
        a
    } else {
        m
    }
}

struct Binned {
    /// Column-major bin indices.
    bins: Vec<Vec<u16>>,
    cuts: Vec<Vec<f64>>,
}

fn bin_features(x: &[Vec<f64>], n_features: usize, max_bins: usize) -> Binned {
    let max_bins = max_bins.clamp(2, u16::MAX as usize);
    let mut bins = Vec::with_capacity(n_features);
    let mut cuts = Vec::with_capacity(n_features);
    for f in 0..n_features {
        let mut col: Vec<f64> = x.iter().map(|r| r[f]).collect();
        let c = cut_points(&mut col, max_bins);
        bins.push(
            x.iter()
                .map(|r| c.partition_point(|cut| *cut < r[f]) as u16)
                .collect(),
        );
        cuts.push(c);
    }
    Binned { bins, cuts }
}

struct GrowContext<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a Hyperparameters,
}

#[derive(Clone, Copy, Default)]
struct Stat {
    g: f64,
    h: f64,
    n: usize,
}

fn leaf_score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

impl GrowContext<'_> {
    /// Grows a tree over `rows`, writing each row's leaf value into `out`.
    fn grow(&self, rows: Vec<usize>, out: &mut [f64]) -> Tree {
        let mut nodes = Vec::new();
        self.grow_node(rows, 0, &mut nodes, out);
        Tree { nodes }
    }

    fn grow_node(
        &self,
        rows: Vec<usize>,
        depth: usize,
        nodes: &mut Vec<Node>,
        out: &mut [f64],
    ) -> usize {
        let lambda = self.params.l2_regularization;
        let total = rows.iter().fold(Stat::default(), |s, &i| Stat {
            g: s.g + self.grad[i],
            h: s.h + self.hess[i],
            n: s.n + 1,
        });
        let me = nodes.len();
        let split = if depth < self.params.max_depth
            && total.n >= 2 * self.params.min_samples_leaf.max(1)
        {
            self.best_split(&rows, total)
        } else {
            None
        };
        match split {
            None => {
                let value = -self.params.learning_rate * total.g / (total.h + lambda);
                for &i in &rows {
                    out[i] = value;
                }
                nodes.push(Node::Leaf { value });
            }
            Some((feature, bin)) => {
                nodes.push(Node::Leaf { value: 0.0 });
                let col = &self.binned.bins[feature];
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.into_iter().partition(|&i| col[i] as usize <= bin);
                let left = self.grow_node(l, depth + 1, nodes, out);
                let right = self.grow_node(r, depth + 1, nodes, out);
                nodes[me] = Node::Split {
                    feature,
                    threshold: self.binned.cuts[feature][bin],
                    left,
                    right,
                };
            }
        }
        me
    }

    fn best_split(&self, rows: &[usize], total: Stat) -> Option<(usize, usize)> {
        let lambda = self.params.l2_regularization;
        let min_leaf = self.params.min_samples_leaf.max(1);
        let parent = leaf_score(total.g, total.h, lambda);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, cuts) in self.binned.cuts.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let col = &self.binned.bins[f];
            let mut hist = vec![Stat::default(); cuts.len() + 1];
            for &i in rows {
                let s = &mut hist[col[i] as usize];
                s.g += self.grad[i];
                s.h += self.hess[i];
                s.n += 1;
            }
            let mut left = Stat::default();
            for (bin, s) in hist[..cuts.len()].iter().enumerate() {
                left.g += s.g;
                left.h += s.h;
                left.n += s.n;
                let right_n = total.n - left.n;
                if left.n < min_leaf {
                    continue;
                }
                if right_n < min_leaf {
                    break;
                }
                let gain = leaf_score(left.g, left.h, lambda)
                    + leaf_score(total.g - left.g, total.h - left.h, lambda)
                    - parent;
                if gain > 1e-12 && best.is_none_or(|(b, _, _)| gain > b) {
                    best = Some((gain, f, bin));
                }
            }
        }
        best.map(|(_, f, bin)| (f, bin))
    }
}

/// Fits an ensemble. `y` holds class indices in `0..n_classes`.
pub fn fit(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &Hyperparameters,
) -> GbdtEnsemble {
    assert_eq!(x.len(), y.len());
    assert!(n_classes >= 2);
    let n = x.len();
    let n_features = x.first().map_or(0, Vec::len);
    let binned = bin_features(x, n_features, params.max_bins);
    let n_scores = if n_classes == 2 { 1 } else { n_classes };

    let mut freq = vec![0.0; n_classes];
    for &c in y {
        freq[c] += 1.0;
    }
    let eps = 1e-6;
    let base_scores: Vec<f64> = if n_classes == 2 {
        let p = (freq[1] / n as f64).clamp(eps, 1.0 - eps);
        vec![(p / (1.0 - p)).ln()]
    } else {
        freq.iter().map(|f| (f / n as f64).max(eps).ln()).collect()
    };

    let mut scores: Vec<Vec<f64>> = vec![base_scores.clone(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut rounds = Vec::with_capacity(params.trees);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut leaf_out = vec![0.0; n];
    for _ in 0..params.trees {
        let rows: Vec<usize> = if params.subsample < 1.0 {
            let m = ((n as f64 * params.subsample).round() as usize).clamp(1, n);
            let mut r = sample(&mut rng, n, m).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let probs: Vec<Vec<f64>> = scores.iter().map(|s| link(s, n_classes)).collect();
        let mut round = Vec::with_capacity(n_scores);
        for k in 0..n_scores {
            let class = if n_classes == 2 { 1 } else { k };
            for i in 0..n {
                let p = probs[i][class];
                let target = if y[i] == class { 1.0 } else { 0.0 };
                grad[i] = p - target;
                hess[i] = (p * (1.0 - p)).max(1e-16);
            }
            let ctx = GrowContext {
                binned: &binned,
                grad: &grad,
                hess: &hess,
                params,
            };
            let tree = ctx.grow(rows.clone(), &mut leaf_out);
            if rows.len() == n {
                for i in 0..n {
                    scores[i][k] += leaf_out[i];
                }
            } else {
                for (i, s) in scores.iter_mut().enumerate() {
                    s[k] += tree.predict(&x[i]);
                }
            }
            round.push(tree);
        }
        rounds.push(round);
    }
    GbdtEnsemble {
        n_classes,
        n_features,
        base_scores,
        rounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cuts_separate_distinct_values() {
        let mut v = vec![3.0, 1.0, 2.0, 2.0, 1.0];
        let cuts = cut_points(&mut v, 64);
        assert_eq!(cuts, vec![1.5, 2.5]);
        let mut many: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let cuts = cut_points(&mut many, 16);
        assert!(cuts.len() <= 15 && cuts.len() >= 10);
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));
        assert!(cut_points(&mut [4.0, 4.0], 8).is_empty());
    }

    #[test]
    fn learns_a_threshold() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..100).map(|i| usize::from(i >= 60)).collect();
        let params = Hyperparameters {
            trees: 30,
            max_depth: 2,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let m = fit(&x, &y, 2, &params);
        for (xi, &yi) in x.iter().zip(&y) {
            let p = m.predict_proba(xi);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert_eq!(usize::from(p[1] > 0.5), yi);
        }
        assert!(m.rounds.iter().all(|r| r[0].depth() <= 2));
    }

    #[test]
    fn multiclass_softmax() {
        let x: Vec<Vec<f64>> = (0..90)
            .map(|i| vec![(i % 30) as f64, (i / 30) as f64])
            .collect();
        let y: Vec<usize> = (0..90).map(|i| i / 30).collect();
        let params = Hyperparameters {
            trees: 20,
            min_samples_leaf: 5,
            ..Default::default()
        };
        let m = fit(&x, &y, 3, &params);
        assert_eq!(m.rounds[0].len(), 3);
        for (xi, &yi) in x.iter().zip(&y) {
            let p = m.predict_proba(xi);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(arg, yi);
        }
    }

    #[test]
    fn fit_is_deterministic_with_subsampling() {
        let x: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i * 7 % 13) as f64, i as f64])
            .collect();
        let y: Vec<usize> = (0..200).map(|i| usize::from(i % 3 == 0)).collect();
        let params = Hyperparameters {
            trees: 10,
            subsample: 0.7,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(fit(&x, &y, 2, &params), fit(&x, &y, 2, &params));
    }
}
