//! Random Forest baseline, grown from scratch with Gini splits, and the
//! self-labeling loop built on it.

mod self_label;
mod tree;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EvalTask;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, scorecard, SelectionReport};
use crate::numerics::Matrix;
use crate::seed::derive_seed;

pub use self_label::{self_label, SelfLabelOutcome, SelfLabelState, DEFAULT_SELF_LABEL_ITERATIONS};
pub use tree::{best_split, default_max_features, gini, DecisionTree, Node, Split, TreeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
    /// Features examined per node; `None` uses `ceil(sqrt(n))`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            bootstrap: true,
            max_features: None,
        }
    }
}

impl ForestConfig {
    fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf,
            max_features: self.max_features,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "trees={} depth={} split={} leaf={} bootstrap={}",
            self.n_trees,
            self.max_depth.map_or("none".to_string(), |d| d.to_string()),
            self.min_samples_split,
            self.min_samples_leaf,
            self.bootstrap
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Grows `cfg.n_trees` trees, each from its own pre-drawn seed, so the
    /// forest is identical however the trees are scheduled.
    pub fn fit(cfg: &ForestConfig, x: &Matrix, y: &[bool], seed: u64) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim("forest", format!("{} rows for {} labels", x.rows(), y.len())));
        }
        if !(y.iter().any(|&v| v) && y.iter().any(|&v| !v)) {
            return Err(Error::Data("random forest needs both classes in training data".into()));
        }
        if cfg.n_trees == 0 {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        let tree_cfg = cfg.tree_config();
        let n = x.rows();
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
                let rows: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit(&tree_cfg, x, y, &rows, &mut rng)
            })
            .collect();
        Ok(RandomForest { trees })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    /// Mean over trees of the leaf positive frequency.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_proba(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &Matrix) -> Vec<bool> {
        x.iter_rows().map(|r| self.predict_proba(r) > 0.5).collect()
    }

    /// Text node list: `forest T`, then per tree `tree N` followed by N lines
    /// of `S feature threshold left right` or `L negatives positives`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "forest {}", self.trees.len());
        for t in &self.trees {
            let _ = writeln!(s, "tree {}", t.nodes.len());
            for n in &t.nodes {
                match n {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let _ = writeln!(s, "S {feature} {threshold} {left} {right}");
                    }
                    Node::Leaf {
                        negatives,
                        positives,
                    } => {
                        let _ = writeln!(s, "L {negatives} {positives}");
                    }
                }
            }
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, m: &str| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message: m.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let count: usize = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("forest "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(1, "expected `forest <count>`"))?;
        let mut trees = Vec::with_capacity(count);
        for _ in 0..count {
            let (no, l) = lines.next().ok_or_else(|| err(0, "truncated forest"))?;
            let nodes_n: usize = l
                .strip_prefix("tree ")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(no, "expected `tree <nodes>`"))?;
            let mut nodes = Vec::with_capacity(nodes_n);
            for _ in 0..nodes_n {
                let (no, l) = lines.next().ok_or_else(|| err(0, "truncated tree"))?;
                let f: Vec<&str> = l.split(' ').collect();
                let node = match f[..] {
                    ["S", feat, thr, left, right] => Node::Split {
                        feature: feat.parse().map_err(|_| err(no, "bad feature"))?,
                        threshold: thr.parse().map_err(|_| err(no, "bad threshold"))?,
                        left: left.parse().map_err(|_| err(no, "bad child"))?,
                        right: right.parse().map_err(|_| err(no, "bad child"))?,
                    },
                    ["L", neg, pos] => Node::Leaf {
                        negatives: neg.parse().map_err(|_| err(no, "bad count"))?,
                        positives: pos.parse().map_err(|_| err(no, "bad count"))?,
                    },
                    _ => return Err(err(no, "bad node line")),
                };
                nodes.push(node);
            }
            trees.push(DecisionTree { nodes });
        }
        Ok(RandomForest { trees })
    }
}

/// Hyperparameter grid for the forest baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestGrid {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<Option<usize>>,
    pub min_samples_split: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    pub bootstrap: Vec<bool>,
}

impl Default for ForestGrid {
    /// 4 × 3 × 3 × 3 × 2 = 216 combinations.
    fn default() -> Self {
        ForestGrid {
            n_trees: vec![100, 200, 300, 500],
            max_depth: vec![Some(10), Some(30), Some(50)],
            min_samples_split: vec![2, 5, 10],
            min_samples_leaf: vec![1, 2, 4],
            bootstrap: vec![true, false],
        }
    }
}

impl ForestGrid {
    pub fn single(cfg: &ForestConfig) -> Self {
        ForestGrid {
            n_trees: vec![cfg.n_trees],
            max_depth: vec![cfg.max_depth],
            min_samples_split: vec![cfg.min_samples_split],
            min_samples_leaf: vec![cfg.min_samples_leaf],
            bootstrap: vec![cfg.bootstrap],
        }
    }

    /// Every combination, in nested order (trees outermost).
    pub fn combinations(&self) -> Vec<ForestConfig> {
        let mut out = Vec::new();
        for &n_trees in &self.n_trees {
            for &max_depth in &self.max_depth {
                for &min_samples_split in &self.min_samples_split {
                    for &min_samples_leaf in &self.min_samples_leaf {
                        for &bootstrap in &self.bootstrap {
                            out.push(ForestConfig {
                                n_trees,
                                max_depth,
                                min_samples_split,
                                min_samples_leaf,
                                bootstrap,
                                max_features: None,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Which baseline a grid search evaluates.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Plain,
    SelfLabel { max_iterations: usize },
}

/// Fits a baseline on one task's support + baseline negatives and returns
/// its predictions on the final test rows.
pub fn baseline_predictions(
    cfg: &ForestConfig,
    kind: Baseline,
    task: &EvalTask,
    seed: u64,
) -> Result<Vec<bool>> {
    let forest = match kind {
        Baseline::Plain => {
            let rows = task.split.train_rows();
            RandomForest::fit(cfg, &task.rows(&rows), &task.labels_of(&rows), seed)?
        }
        Baseline::SelfLabel { max_iterations } => {
            self_label(cfg, task, max_iterations, seed)?.forest
        }
    };
    Ok(forest.predict(&task.rows(&task.split.final_test)))
}

/// Scores every grid combination by its mean final-test scorecard over
/// `tasks`; the shared configuration for each criterion is the report's
/// argmax.
pub fn rf_grid_search(
    grid: &ForestGrid,
    tasks: &[EvalTask],
    kind: Baseline,
    seed: u64,
) -> Result<(Vec<ForestConfig>, SelectionReport)> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("grid search needs validation tasks".into()));
    }
    let combos = grid.combinations();
    let scores = combos
        .par_iter()
        .map(|cfg| {
            let cards = tasks
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let pred = baseline_predictions(cfg, kind, t, derive_seed(seed, j as u64))?;
                    scorecard(t.task.id.clone(), &pred, &t.labels_of(&t.split.final_test))
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate(&cards)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SelectionReport::new(combos.iter().map(ForestConfig::describe).collect(), scores)?;
    Ok((combos, report))
}
