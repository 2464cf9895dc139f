use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_epoch, TrainConfig};
use crate::data::{sample_support, EpisodeConfig, EvalTask, InstanceSpec};
use crate::error::{Error, Result};
use crate::metrics::{scorecard, Criterion, Scores};
use crate::model::{DeepSetsNet, Prediction, SetBatch};
use crate::numerics::OptimizerState;
use crate::seed::derive_seed;

/// Imbalance factors tried per task.
pub const FINE_TUNE_FACTORS: [f64; 4] = [30.0, 50.0, 70.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub l1: f64,
    pub positive_weight: f64,
    /// Negatives drawn per epoch, per support positive.
    pub factor: f64,
    /// How many times the negative set is seen in total.
    pub passes: f64,
    pub batch_size: usize,
    pub min_support: usize,
    pub max_support: usize,
    pub seed: u64,
}

impl FineTuneConfig {
    /// Inherits the meta-training settings with the learning rate halved.
    pub fn from_train(cfg: &TrainConfig, factor: f64) -> Self {
        FineTuneConfig {
            learning_rate: cfg.learning_rate / 2.0,
            l1: cfg.l1,
            positive_weight: cfg.positive_weight,
            factor,
            passes: 3.0,
            batch_size: cfg.batch_size,
            min_support: cfg.episodes.min_support,
            max_support: cfg.episodes.max_support,
            seed: cfg.seed,
        }
    }

    pub fn negatives_per_epoch(&self, positives: usize) -> usize {
        ((positives as f64 * self.factor).round() as usize).max(1)
    }
}

/// Epochs until the cumulative count of sampled negatives reaches
/// `passes × negatives`.
pub fn fine_tune_epochs(positives: usize, negatives: usize, factor: f64, passes: f64) -> usize {
    let per_epoch = ((positives as f64 * factor).round()).max(1.0);
    ((passes * negatives as f64) / per_epoch).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneEpoch {
    /// 0 is the network before fine-tuning.
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    pub negatives_seen: usize,
    /// Scores on the task's training split.
    pub train_scores: Scores,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub net: DeepSetsNet,
    pub chosen_epoch: usize,
    pub history: Vec<FineTuneEpoch>,
}

impl FineTuneOutcome {
    pub fn chosen(&self) -> &FineTuneEpoch {
        &self.history[self.chosen_epoch]
    }
}

/// Scores `net` on the task's training split: support positives and the
/// baseline negatives. Each support positive is classified against the
/// support set without itself; negatives use the full support set.
pub fn train_split_scores(net: &DeepSetsNet, task: &EvalTask) -> Result<Scores> {
    let t = &task.task;
    let support = &task.split.support;
    if support.len() < 2 {
        return Err(Error::Data(format!(
            "task {} needs at least 2 support positives",
            t.id
        )));
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let n = t.feature_dim();
    let queries: Vec<(usize, bool)> = support
        .iter()
        .map(|&i| (i, true))
        .chain(task.split.baseline_negatives.iter().map(|&i| (i, false)))
        .collect();
    for chunk in queries.chunks(256) {
        let mut b = SetBatch::with_feature_dim(n);
        for &(q, label) in chunk {
            let rows = support.iter().filter(|&&s| s != q).map(|&s| t.example(s));
            b.push(rows, t.example(q), label)?;
        }
        b.finish();
        preds.extend(net.predict_batch(&b)?.iter().map(Prediction::label));
        labels.extend_from_slice(b.labels());
    }
    Ok(scorecard(t.id.clone(), &preds, &labels)?.scores)
}

/// Fine-tunes a copy of `net` on one task. Each epoch pairs every support
/// positive (against a sub-sampled support set without itself) and
/// `|P|·factor` negatives drawn with replacement from the baseline negatives.
/// The returned network is the epoch, counting the untouched input as
/// epoch 0, with the best training-split `criterion`; ties keep the earlier
/// epoch.
pub fn fine_tune(
    net: &DeepSetsNet,
    task: &EvalTask,
    cfg: &FineTuneConfig,
    criterion: Criterion,
) -> Result<FineTuneOutcome> {
    let positives = &task.split.support;
    let negatives = &task.split.baseline_negatives;
    if negatives.is_empty() {
        return Err(Error::Data(format!(
            "task {}: fine-tuning needs negative examples",
            task.task.id
        )));
    }
    if !(cfg.factor > 0.0 && cfg.passes > 0.0) {
        return Err(Error::InvalidArgument("imbalance factor and passes must be positive".into()));
    }
    let episodes = EpisodeConfig {
        min_support: cfg.min_support,
        max_support: cfg.max_support,
        ..EpisodeConfig::default()
    };
    let epochs = fine_tune_epochs(positives.len(), negatives.len(), cfg.factor, cfg.passes);
    let per_epoch = cfg.negatives_per_epoch(positives.len());
    let tasks = std::slice::from_ref(&task.task);

    let mut current = net.clone();
    let mut opt = OptimizerState::adam(cfg.learning_rate, cfg.l1)?;
    let mut history = vec![FineTuneEpoch {
        epoch: 0,
        mean_loss: None,
        negatives_seen: 0,
        train_scores: train_split_scores(&current, task)?,
    }];
    let mut best = (history[0].train_scores.get(criterion), 0, current.clone());
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let mut specs = Vec::with_capacity(positives.len() + per_epoch);
        for &q in positives {
            specs.push(InstanceSpec {
                task: 0,
                query: q,
                support: sample_support(&mut rng, positives, Some(q), &episodes),
                label: true,
                map: None,
            });
        }
        for _ in 0..per_epoch {
            let q = negatives[rng.random_range(0..negatives.len())];
            specs.push(InstanceSpec {
                task: 0,
                query: q,
                support: sample_support(&mut rng, positives, None, &episodes),
                label: false,
                map: None,
            });
        }
        let mean_loss = run_epoch(
            &mut current,
            &mut opt,
            tasks,
            specs,
            cfg.batch_size,
            cfg.positive_weight,
            derive_seed(cfg.seed, u64::MAX - epoch as u64),
        )?;
        let train_scores = train_split_scores(&current, task)?;
        let v = train_scores.get(criterion);
        if v > best.0 {
            best = (v, epoch, current.clone());
        }
        history.push(FineTuneEpoch {
            epoch,
            mean_loss: Some(mean_loss),
            negatives_seen: epoch * per_epoch,
            train_scores,
        });
    }
    Ok(FineTuneOutcome {
        net: best.2,
        chosen_epoch: best.1,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_cfg, toy_net, toy_task};
    use super::*;
    use crate::data::make_test_split;

    #[test]
    fn epoch_count_covers_three_passes() {
        // 197 positives at factor 50 draw 9,850 negatives per epoch
        let cfg = FineTuneConfig {
            factor: 50.0,
            ..FineTuneConfig::from_train(&TrainConfig::default(), 50.0)
        };
        assert_eq!(cfg.negatives_per_epoch(197), 9850);
        assert_eq!(fine_tune_epochs(197, 9850, 50.0, 3.0), 3);
        assert_eq!(fine_tune_epochs(197, 9851, 50.0, 3.0), 4);
        for f in FINE_TUNE_FACTORS {
            let e = fine_tune_epochs(20, 1000, f, 3.0);
            let per = (20.0 * f) as usize;
            assert!(e * per >= 3000 && (e - 1) * per < 3000);
        }
    }

    #[test]
    fn learning_rate_is_halved() {
        let base = TrainConfig::default();
        assert_eq!(FineTuneConfig::from_train(&base, 30.0).learning_rate, base.learning_rate / 2.0);
    }

    #[test]
    fn selection_never_falls_below_zero_shot() {
        let task = toy_task("a", 60, 600, 11);
        let split = make_test_split(&task, 0.2, 0).unwrap();
        let et = EvalTask { task, split };
        let net = toy_net(4);
        let cfg = FineTuneConfig::from_train(&toy_cfg(1), 5.0);
        let out = fine_tune(&net, &et, &cfg, Criterion::F1).unwrap();
        let zero = train_split_scores(&net, &et).unwrap().f1;
        assert_eq!(out.history[0].train_scores.f1, zero);
        assert!(out.chosen().train_scores.f1 >= zero);
        let (p, n) = (et.split.support.len(), et.split.baseline_negatives.len());
        assert_eq!(out.history.len(), 1 + fine_tune_epochs(p, n, 5.0, 3.0));
        assert_eq!(
            train_split_scores(&out.net, &et).unwrap(),
            out.chosen().train_scores
        );
    }

    #[test]
    fn empty_negative_set_is_an_error() {
        let task = toy_task("a", 60, 600, 11);
        let mut split = make_test_split(&task, 0.2, 0).unwrap();
        split.baseline_negatives.clear();
        let et = EvalTask { task, split };
        let cfg = FineTuneConfig::from_train(&toy_cfg(1), 30.0);
        assert!(fine_tune(&toy_net(0), &et, &cfg, Criterion::F1).is_err());
    }
}
