use serde::{Deserialize, Serialize};

use super::{ForestConfig, RandomForest};
use crate::data::EvalTask;
use crate::error::{Error, Result};
use crate::metrics::scorecard;
use crate::seed::derive_seed;

pub const DEFAULT_SELF_LABEL_ITERATIONS: usize = 10;

/// One self-labeling iteration, recorded after fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfLabelState {
    pub iteration: usize,
    /// Positive training rows (task indices) the model was fitted on.
    pub positives: Vec<usize>,
    /// Unlabeled pool rows still unclaimed after this iteration.
    pub remaining_pool: usize,
    /// Pool rows predicted positive by this iteration's model.
    pub newly_labeled: usize,
    /// F1 of this iteration's model on the task's training split.
    pub train_f1: f64,
}

#[derive(Clone, Debug)]
pub struct SelfLabelOutcome {
    pub forest: RandomForest,
    pub chosen_iteration: usize,
    pub history: Vec<SelfLabelState>,
}

/// Fit, predict on the unlabeled pool, move predicted positives into the
/// positive training set and refit. Stops when nothing new is predicted
/// positive or after `max_iterations` fits. The returned model is the one
/// with the highest training-split F1; ties go to the later iteration.
pub fn self_label(
    cfg: &ForestConfig,
    task: &EvalTask,
    max_iterations: usize,
    seed: u64,
) -> Result<SelfLabelOutcome> {
    let split = &task.split;
    if split.self_label_pool.iter().any(|i| split.final_test.contains(i)) {
        return Err(Error::Data(format!(
            "task {}: self-labeling pool overlaps the final test set",
            task.task.id
        )));
    }
    let train_rows = split.train_rows();
    let train_x = task.rows(&train_rows);
    let train_y = task.labels_of(&train_rows);

    let mut positives = split.support.clone();
    let mut pool = split.self_label_pool.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, RandomForest)> = None;

    for iteration in 0..max_iterations.max(1) {
        let rows: Vec<usize> = positives
            .iter()
            .chain(&split.baseline_negatives)
            .copied()
            .collect();
        let y: Vec<bool> = (0..rows.len()).map(|i| i < positives.len()).collect();
        let forest = RandomForest::fit(cfg, &task.rows(&rows), &y, derive_seed(seed, iteration as u64))?;
        let train_f1 = scorecard(task.task.id.clone(), &forest.predict(&train_x), &train_y)?
            .scores
            .f1;

        let predicted = if pool.is_empty() {
            Vec::new()
        } else {
            forest.predict(&task.rows(&pool))
        };
        let (claimed, rest): (Vec<(usize, bool)>, Vec<(usize, bool)>) =
            pool.iter().copied().zip(predicted.iter().copied().chain(std::iter::repeat(false))).partition(|p| p.1);
        history.push(SelfLabelState {
            iteration,
            positives: positives.clone(),
            remaining_pool: rest.len(),
            newly_labeled: claimed.len(),
            train_f1,
        });
        if best.as_ref().is_none_or(|b| train_f1 >= b.0) {
            best = Some((train_f1, iteration, forest));
        }
        if claimed.is_empty() {
            break;
        }
        positives.extend(claimed.iter().map(|p| p.0));
        pool = rest.into_iter().map(|p| p.0).collect();
    }
    let (_, chosen_iteration, forest) = best.expect("at least one iteration runs");
    Ok(SelfLabelOutcome {
        forest,
        chosen_iteration,
        history,
    })
}
