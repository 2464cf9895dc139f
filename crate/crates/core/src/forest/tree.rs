use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

/// Gini impurity of a node holding `neg` negatives and `pos` positives.
pub fn gini(neg: usize, pos: usize) -> f64 {
    let n = (neg + pos) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (p0, p1) = (neg as f64 / n, pos as f64 / n);
    1.0 - p0 * p0 - p1 * p1
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Size-weighted Gini impurity of the two children.
    pub impurity: f64,
}

/// Lowest weighted-Gini split of `rows` over `features`. Thresholds are
/// midpoints between consecutive distinct values; rows with
/// `x[feature] <= threshold` go left. Ties keep the earliest candidate.
pub fn best_split(
    x: &Matrix,
    y: &[bool],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    let mut best: Option<Split> = None;
    for &f in features {
        if let Some(s) = best_split_on(x, y, rows, f, min_leaf) {
            if best.is_none_or(|b| s.impurity < b.impurity) {
                best = Some(s);
            }
        }
    }
    best
}

fn best_split_on(x: &Matrix, y: &[bool], rows: &[usize], f: usize, min_leaf: usize) -> Option<Split> {
    let mut sorted: Vec<(f64, bool)> = rows.iter().map(|&r| (x.get(r, f), y[r])).collect();
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let total_pos = sorted.iter().filter(|s| s.1).count();
    let mut left_pos = 0;
    let mut best: Option<Split> = None;
    for i in 0..n.saturating_sub(1) {
        if sorted[i].1 {
            left_pos += 1;
        }
        let left_n = i + 1;
        if sorted[i].0 == sorted[i + 1].0 || left_n < min_leaf || n - left_n < min_leaf {
            continue;
        }
        let right_pos = total_pos - left_pos;
        let imp = (left_n as f64 * gini(left_n - left_pos, left_pos)
            + (n - left_n) as f64 * gini(n - left_n - right_pos, right_pos))
            / n as f64;
        if best.is_none_or(|b| imp < b.impurity) {
            best = Some(Split {
                feature: f,
                threshold: 0.5 * (sorted[i].0 + sorted[i + 1].0),
                impurity: imp,
            });
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features examined per node; `None` uses `ceil(sqrt(n))`.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        negatives: usize,
        positives: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    pub(crate) nodes: Vec<Node>,
}

/// ceil(sqrt(n))
pub fn default_max_features(n: usize) -> usize {
    let mut k = (n as f64).sqrt().floor() as usize;
    while k * k < n {
        k += 1;
    }
    k.max(1)
}

impl DecisionTree {
    pub fn fit(cfg: &TreeConfig, x: &Matrix, y: &[bool], rows: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n_features = x.cols();
        let max_features = cfg
            .max_features
            .unwrap_or_else(|| default_max_features(n_features))
            .clamp(1, n_features);
        let mut nodes = vec![Node::Leaf {
            negatives: 0,
            positives: 0,
        }];
        // (node index, rows, depth)
        let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, rows.to_vec(), 0)];
        let mut order: Vec<usize> = (0..n_features).collect();
        while let Some((id, rows, depth)) = stack.pop() {
            let pos = rows.iter().filter(|&&r| y[r]).count();
            let neg = rows.len() - pos;
            let leaf = Node::Leaf {
                negatives: neg,
                positives: pos,
            };
            let splittable = pos > 0
                && neg > 0
                && cfg.max_depth.is_none_or(|d| depth < d)
                && rows.len() >= cfg.min_samples_split.max(2)
                && rows.len() >= 2 * cfg.min_samples_leaf.max(1);
            if !splittable {
                nodes[id] = leaf;
                continue;
            }
            // Visit features in random order until `max_features` of them
            // offer a valid split.
            order.shuffle(rng);
            let mut best: Option<Split> = None;
            let mut informative = 0;
            for &f in &order {
                if informative >= max_features {
                    break;
                }
                if let Some(s) = best_split_on(x, y, &rows, f, cfg.min_samples_leaf.max(1)) {
                    informative += 1;
                    if best.is_none_or(|b| s.impurity < b.impurity) {
                        best = Some(s);
                    }
                }
            }
            let Some(split) = best else {
                nodes[id] = leaf;
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .partition(|&&i| x.get(i, split.feature) <= split.threshold);
            let left = nodes.len();
            nodes.push(Node::Leaf {
                negatives: 0,
                positives: 0,
            });
            let right = nodes.len();
            nodes.push(Node::Leaf {
                negatives: 0,
                positives: 0,
            });
            nodes[id] = Node::Split {
                feature: split.feature,
                threshold: split.threshold,
                left,
                right,
            };
            stack.push((right, r, depth + 1));
            stack.push((left, l, depth + 1));
        }
        DecisionTree { nodes }
    }

    fn leaf_for(&self, x: &[f64]) -> (usize, usize) {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
                Node::Leaf {
                    negatives,
                    positives,
                } => return (negatives, positives),
            }
        }
    }

    /// Fraction of positives in the leaf reached by `x`.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let (neg, pos) = self.leaf_for(x);
        if neg + pos == 0 {
            0.0
        } else {
            pos as f64 / (neg + pos) as f64
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaves(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Leaf {
                negatives,
                positives,
            } => Some((negatives, positives)),
            _ => None,
        })
    }
}
