use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{meta_train, EpochLog, TrainConfig, TrainOutcome};
use crate::data::{EvalTask, Task};
use crate::error::{Error, Result};
use crate::metrics::{Criterion, SelectionReport};
use crate::model::{DeepSetsNet, NetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainGrid {
    pub learning_rate: Vec<f64>,
    pub l1: Vec<f64>,
    pub positive_weight: Vec<f64>,
}

impl Default for TrainGrid {
    /// 2 × 2 × 5 = 20 configurations.
    fn default() -> Self {
        TrainGrid {
            learning_rate: vec![1e-3, 1e-4],
            l1: vec![1e-5, 1e-6],
            positive_weight: vec![0.01, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

impl TrainGrid {
    pub fn single(cfg: &TrainConfig) -> Self {
        TrainGrid {
            learning_rate: vec![cfg.learning_rate],
            l1: vec![cfg.l1],
            positive_weight: vec![cfg.positive_weight],
        }
    }

    /// Every combination applied to `base`, learning rate outermost.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &l1 in &self.l1 {
                for &positive_weight in &self.positive_weight {
                    out.push(TrainConfig {
                        learning_rate,
                        l1,
                        positive_weight,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub configs: Vec<TrainConfig>,
    pub runs: Vec<TrainOutcome>,
    /// Per configuration, the best meta-validation score reached for each
    /// criterion.
    pub report: SelectionReport,
}

impl GridOutcome {
    /// Index of the winning configuration for `c`.
    pub fn chosen(&self, c: Criterion) -> usize {
        self.report.best(c)
    }

    pub fn selected(&self, c: Criterion) -> (&TrainConfig, &DeepSetsNet) {
        let i = self.chosen(c);
        (&self.configs[i], self.runs[i].best(c))
    }
}

/// Trains every configuration from the same initialization and scores it on
/// the meta-validation tasks. Runs are independent and execute in parallel;
/// `hook(config_index, log, net)` is called after every epoch of every run.
pub fn grid_search(
    net: &NetConfig,
    grid: &TrainGrid,
    base: &TrainConfig,
    train: &[Task],
    validation: &[EvalTask],
    hook: &(dyn Fn(usize, &EpochLog, &DeepSetsNet) -> Result<()> + Sync),
) -> Result<GridOutcome> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument("model selection needs validation tasks".into()));
    }
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::InvalidArgument("training grid is empty".into()));
    }
    let runs = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            log::info!("grid {}/{}: {}", i + 1, configs.len(), cfg.describe());
            let init = DeepSetsNet::build(net.clone())?;
            meta_train(init, train, validation, cfg, &mut |l, n| hook(i, l, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SelectionReport::new(
        configs.iter().map(TrainConfig::describe).collect(),
        runs.iter().map(TrainOutcome::best_scores).collect(),
    )?;
    Ok(GridOutcome {
        configs,
        runs,
        report,
    })
}
