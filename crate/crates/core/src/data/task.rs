use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-feature z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

/// One fully labeled one-class problem: positives form the support pool `P`,
/// every other example is a query in `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    features: Matrix,
    labels: Vec<bool>,
    norm: Option<NormStats>,
}

impl Task {
    pub fn new(id: impl Into<String>, features: Matrix, labels: Vec<bool>) -> Result<Self> {
        let id = id.into();
        if features.rows() != labels.len() {
            return Err(Error::dim(
                "task",
                format!("{} rows but {} labels", features.rows(), labels.len()),
            ));
        }
        if features.rows() == 0 {
            return Err(Error::Data(format!("task {id} is empty")));
        }
        if !labels.iter().any(|&y| y) {
            return Err(Error::Data(format!("task {id} has no positive examples")));
        }
        Ok(Task {
            id,
            features,
            labels,
            norm: None,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Row indices of `P`.
    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i]).collect()
    }

    /// Row indices of `U`.
    pub fn query_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels[i]).collect()
    }

    /// Support set size `k`.
    pub fn k(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    /// Query count `m`.
    pub fn m(&self) -> usize {
        self.len() - self.k()
    }

    /// Z-scores every feature over all examples of the task (positives and
    /// queries alike). Zero-variance features are centered only. Stats
    /// compose, so [`Task::denormalize`] always recovers the raw values.
    pub fn normalize(&self) -> Result<Task> {
        if self.len() < 2 {
            return Err(Error::Data(format!(
                "task {} needs at least 2 examples to normalize",
                self.id
            )));
        }
        let n = self.feature_dim();
        let rows = self.len() as f64;
        let mut mean = vec![0.0; n];
        for r in self.features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; n];
        for r in self.features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / rows).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        let mut features = self.features.clone();
        for i in 0..features.rows() {
            for ((v, m), s) in features.row_mut(i).iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        let norm = match &self.norm {
            None => NormStats { mean, std },
            Some(prev) => NormStats {
                mean: prev
                    .mean
                    .iter()
                    .zip(&prev.std)
                    .zip(&mean)
                    .map(|((pm, ps), m)| pm + ps * m)
                    .collect(),
                std: prev.std.iter().zip(&std).map(|(a, b)| a * b).collect(),
            },
        };
        Ok(Task {
            id: self.id.clone(),
            features,
            labels: self.labels.clone(),
            norm: Some(norm),
        })
    }

    pub fn denormalize(&self) -> Result<Task> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::State(format!("task {} is not normalized", self.id)))?;
        let mut features = self.features.clone();
        for i in 0..features.rows() {
            for ((v, m), s) in features.row_mut(i).iter_mut().zip(&norm.mean).zip(&norm.std) {
                *v = *v * s + m;
            }
        }
        Ok(Task {
            id: self.id.clone(),
            features,
            labels: self.labels.clone(),
            norm: None,
        })
    }
}

/// Disjoint train / validation / test task ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl MetaSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Data(format!("task {id} appears in two splits")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition of one evaluation task's rows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    /// Positives given to every method.
    pub support: Vec<usize>,
    /// Negatives available to fully supervised baselines.
    pub baseline_negatives: Vec<usize>,
    /// Unlabeled pool for self-labeling.
    pub self_label_pool: Vec<usize>,
    /// Held-out rows shared by every method.
    pub final_test: Vec<usize>,
}

impl TaskSplit {
    pub fn parts(&self) -> [(&'static str, &[usize]); 4] {
        [
            ("support", &self.support),
            ("baseline_negatives", &self.baseline_negatives),
            ("self_label_pool", &self.self_label_pool),
            ("final_test", &self.final_test),
        ]
    }

    /// Checks that the four parts are disjoint and cover `0..rows`.
    pub fn check_partition(&self, rows: usize) -> Result<()> {
        let mut owner = vec![None; rows];
        for (name, part) in self.parts() {
            for &i in part {
                if i >= rows {
                    return Err(Error::Data(format!("{name} row {i} out of range")));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::Data(format!("row {i} in both {prev} and {name}")));
                }
                owner[i] = Some(name);
            }
        }
        if let Some(i) = owner.iter().position(Option::is_none) {
            return Err(Error::Data(format!("row {i} is in no part")));
        }
        Ok(())
    }

    /// Baseline training rows: support positives then baseline negatives.
    pub fn train_rows(&self) -> Vec<usize> {
        self.support
            .iter()
            .chain(&self.baseline_negatives)
            .copied()
            .collect()
    }
}

/// An evaluation task with its partition fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub task: Task,
    pub split: TaskSplit,
}

impl EvalTask {
    pub fn support(&self) -> Matrix {
        self.task.features().select_rows(&self.split.support)
    }

    pub fn rows(&self, idx: &[usize]) -> Matrix {
        self.task.features().select_rows(idx)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<bool> {
        idx.iter().map(|&i| self.task.labels()[i]).collect()
    }
}

/// Splits an evaluation task: `fraction` of positives become the support
/// set, the same fraction of negatives the baseline training negatives, and
/// the remaining positives and negatives are each halved between the
/// self-labeling pool and the final test set.
pub fn make_test_split(task: &Task, fraction: f64, seed: u64) -> Result<TaskSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "support fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut pos = task.positive_indices();
    if pos.len() < 5 {
        return Err(Error::Data(format!(
            "task {} has {} positives; at least 5 are needed",
            task.id,
            pos.len()
        )));
    }
    let mut neg = task.query_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_support = ((pos.len() as f64 * fraction).round() as usize).max(1);
    let n_base = (neg.len() as f64 * fraction).round() as usize;
    let (support, rest_pos) = pos.split_at(n_support);
    let (base, rest_neg) = neg.split_at(n_base);
    let half_pos = rest_pos.len() / 2;
    let half_neg = rest_neg.len() / 2;
    let mut pool: Vec<usize> = rest_pos[..half_pos]
        .iter()
        .chain(&rest_neg[..half_neg])
        .copied()
        .collect();
    let mut test: Vec<usize> = rest_pos[half_pos..]
        .iter()
        .chain(&rest_neg[half_neg..])
        .copied()
        .collect();
    let mut support = support.to_vec();
    let mut base = base.to_vec();
    for part in [&mut support, &mut base, &mut pool, &mut test] {
        part.sort_unstable();
    }
    Ok(TaskSplit {
        support,
        baseline_negatives: base,
        self_label_pool: pool,
        final_test: test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn task_with(pos: usize, neg: usize, seed: u64) -> Task {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = pos + neg;
        let f = Matrix::from_vec(rows, 3, (0..rows * 3).map(|_| rng.random_range(-5.0..9.0)).collect())
            .unwrap();
        let labels = (0..rows).map(|i| i < pos).collect();
        Task::new("t", f, labels).unwrap()
    }

    #[test]
    fn constant_column_is_centered_not_scaled() {
        let f = Matrix::from_rows(&[[2.0, 1.0], [2.0, 3.0], [2.0, 5.0]]).unwrap();
        let t = Task::new("c", f, vec![true, false, false]).unwrap();
        let n = t.normalize().unwrap();
        assert!(n.features().iter_rows().all(|r| r[0] == 0.0));
        assert_eq!(n.norm().unwrap().std[0], 1.0);
    }

    #[test]
    fn normalized_columns_have_zero_mean_unit_std() {
        let n = task_with(30, 300, 1).normalize().unwrap();
        for j in 0..3 {
            let col: Vec<f64> = n.features().iter_rows().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn denormalize_recovers_raw_values() {
        let t = task_with(10, 50, 2);
        let back = t.normalize().unwrap().normalize().unwrap().denormalize().unwrap();
        assert!(back.features().max_abs_diff(t.features()) < 1e-9);
    }

    #[test]
    fn renormalizing_is_idempotent() {
        let once = task_with(12, 80, 3).normalize().unwrap();
        let twice = once.normalize().unwrap();
        assert!(twice.features().max_abs_diff(once.features()) < 1e-9);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let t = task_with(360, 3600, 4);
        let s = make_test_split(&t, 0.1, 9).unwrap();
        assert_eq!(s.support.len(), 36);
        assert_eq!(s.baseline_negatives.len(), 360);
        assert!(s.support.iter().all(|&i| t.labels()[i]));
        assert!(s.baseline_negatives.iter().all(|&i| !t.labels()[i]));
        s.check_partition(t.len()).unwrap();
        assert_eq!(s, make_test_split(&t, 0.1, 9).unwrap());
        assert_ne!(s, make_test_split(&t, 0.1, 10).unwrap());
    }

    #[test]
    fn too_few_positives_is_error() {
        let t = task_with(4, 100, 5);
        assert!(make_test_split(&t, 0.1, 0).is_err());
    }

    #[test]
    fn meta_split_rejects_overlap() {
        let s = MetaSplit {
            train: vec!["a".into()],
            validation: vec!["b".into()],
            test: vec!["a".into()],
        };
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_every_row(pos in 5usize..60, neg in 0usize..400, seed in any::<u64>()) {
            let t = task_with(pos, neg, seed);
            let s = make_test_split(&t, 0.1, seed).unwrap();
            prop_assert!(s.check_partition(t.len()).is_ok());
            let support: std::collections::BTreeSet<_> = s.support.iter().collect();
            prop_assert!(s.final_test.iter().all(|i| !support.contains(i)));
        }
    }
}
