//! Meta-training, model selection, zero-shot prediction and fine-tuning.

mod finetune;
mod grid;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_meta_instances, EpisodeConfig, EvalTask, InstanceSpec, Task};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, scorecard, Criterion, Scores, TaskScorecard};
use crate::model::{DeepSetsNet, Prediction, SetBatch};
use crate::numerics::{Matrix, OptimizerState, Tape, PROB_FLOOR};
use crate::seed::derive_seed;

pub use finetune::{
    fine_tune, fine_tune_epochs, train_split_scores, FineTuneConfig, FineTuneEpoch, FineTuneOutcome,
    FINE_TUNE_FACTORS,
};
pub use grid::{grid_search, GridOutcome, TrainGrid};

/// Queries scored per forward pass at test time.
const PREDICT_CHUNK: usize = 256;

/// Weighted binary cross-entropy of one prediction:
/// `-(w·y·log p + (1-y)·log(1-p))`, with both probabilities floored at
/// 1e-12.
pub fn loss(pred: &Prediction, label: bool, positive_weight: f64) -> f64 {
    if label {
        -positive_weight * pred.positive.max(PROB_FLOOR).ln()
    } else {
        -pred.negative.max(PROB_FLOOR).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l1: f64,
    /// Loss weight on positive instances.
    pub positive_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub episodes: EpisodeConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l1: 1e-6,
            positive_weight: 1.0,
            epochs: 100,
            batch_size: 64,
            episodes: EpisodeConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.l1 >= 0.0 && self.positive_weight > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {}, l1 {} and class weight {} must be positive",
                self.learning_rate, self.l1, self.positive_weight
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "lr={:e} l1={:e} w+={}",
            self.learning_rate, self.l1, self.positive_weight
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub instances: usize,
    /// Mean meta-validation scores, when validation tasks were given.
    pub validation: Option<Scores>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,loss,instances,precision,recall,f1,f2,f05,bacc,mcc";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.mean_loss, self.instances);
        match &self.validation {
            Some(v) => v.values().iter().for_each(|x| s.push_str(&format!(",{x}"))),
            None => s.push_str(",,,,,,,"),
        }
        s
    }
}

/// Result of one meta-training run. For every criterion the network from
/// the epoch with the best meta-validation score is kept; without
/// validation tasks every criterion maps to the last epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: [usize; 7],
    snapshots: Vec<(usize, DeepSetsNet)>,
}

impl TrainOutcome {
    fn index(c: Criterion) -> usize {
        Criterion::ALL.iter().position(|&x| x == c).expect("criterion listed")
    }

    pub fn best_epoch(&self, c: Criterion) -> usize {
        self.best_epoch[Self::index(c)]
    }

    /// Network at the best epoch for `c`.
    pub fn best(&self, c: Criterion) -> &DeepSetsNet {
        let e = self.best_epoch(c);
        &self
            .snapshots
            .iter()
            .find(|s| s.0 == e)
            .expect("snapshot kept for every best epoch")
            .1
    }

    /// Per criterion, the best score any epoch reached.
    pub fn best_scores(&self) -> Scores {
        let mut s = Scores::default();
        for c in Criterion::ALL {
            let e = self.best_epoch(c);
            let v = self
                .log
                .iter()
                .find(|l| l.epoch == e)
                .and_then(|l| l.validation)
                .map_or(0.0, |v| v.get(c));
            s.set(c, v);
        }
        s
    }
}

fn build_batch(specs: &[InstanceSpec], tasks: &[Task], feature_dim: usize) -> Result<SetBatch> {
    let mut b = SetBatch::with_feature_dim(feature_dim);
    for s in specs {
        s.push_into(&mut b, tasks)?;
    }
    b.finish();
    Ok(b)
}

/// One optimizer step on `batch`; returns the batch loss.
pub(crate) fn train_step(
    net: &mut DeepSetsNet,
    opt: &mut OptimizerState,
    batch: &SetBatch,
    positive_weight: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = net.logits(&mut tape, batch)?;
    let l = tape.cross_entropy(z, batch.labels(), positive_weight)?;
    let value = tape.value(l).get(0, 0);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "loss is {value} after {} optimizer steps (parameter hash {})",
            opt.steps(),
            net.param_hash()
        )));
    }
    tape.backward(l, net.params_mut())?;
    opt.step(net.params_mut());
    if !net.params().iter().all(|(_, m)| m.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite parameters after optimizer step {}",
            opt.steps()
        )));
    }
    Ok(value)
}

/// Trains `specs` for one epoch in shuffled mini-batches; returns the mean
/// batch loss.
pub(crate) fn run_epoch(
    net: &mut DeepSetsNet,
    opt: &mut OptimizerState,
    tasks: &[Task],
    mut specs: Vec<InstanceSpec>,
    batch_size: usize,
    positive_weight: f64,
    shuffle_seed: u64,
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Data("no training instances were drawn".into()));
    }
    specs.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let n = net.config().feature_dim;
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in specs.chunks(batch_size) {
        let batch = build_batch(chunk, tasks, n)?;
        total += train_step(net, opt, &batch, positive_weight)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Meta-trains `net` on instances drawn from `train` each epoch (a fresh
/// negative sub-sample and fresh support sets per epoch). `on_epoch` sees
/// every epoch's log and network, e.g. to write checkpoints.
pub fn meta_train(
    mut net: DeepSetsNet,
    train: &[Task],
    validation: &[EvalTask],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &DeepSetsNet) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("meta-training needs at least one task".into()));
    }
    let mut opt = OptimizerState::adam(cfg.learning_rate, cfg.l1)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = [0usize; 7];
    let mut best_value = [f64::NEG_INFINITY; 7];
    let mut snapshots: Vec<(usize, DeepSetsNet)> = Vec::new();
    let shuffle_base = derive_seed(cfg.seed, u64::MAX);
    for epoch in 1..=cfg.epochs {
        let specs = make_meta_instances(train, &cfg.episodes, derive_seed(cfg.seed, epoch as u64))?;
        let instances = specs.len();
        let mean_loss = run_epoch(
            &mut net,
            &mut opt,
            train,
            specs,
            cfg.batch_size,
            cfg.positive_weight,
            derive_seed(shuffle_base, epoch as u64),
        )?;
        let validation = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&net, validation)?)
        };
        let entry = EpochLog {
            epoch,
            mean_loss,
            instances,
            validation,
        };
        log::debug!("epoch {epoch}: loss {mean_loss:.5}");
        on_epoch(&entry, &net)?;

        let mut improved = false;
        for (i, c) in Criterion::ALL.into_iter().enumerate() {
            // without validation the latest epoch always wins
            let v = validation.map_or(epoch as f64, |s| s.get(c));
            if v > best_value[i] {
                best_value[i] = v;
                best_epoch[i] = epoch;
                improved = true;
            }
        }
        if improved {
            snapshots.push((epoch, net.clone()));
            snapshots.retain(|(e, _)| best_epoch.contains(e));
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        snapshots,
    })
}

/// Scores `queries` with every query paired with the full `support` set.
/// Read-only: the network is not modified.
pub fn predict_task(net: &DeepSetsNet, support: &Matrix, queries: &Matrix) -> Result<Vec<Prediction>> {
    if support.rows() == 0 {
        return Err(Error::InvalidArgument("support set is empty".into()));
    }
    let mut out = Vec::with_capacity(queries.rows());
    let rows: Vec<&[f64]> = queries.iter_rows().collect();
    for chunk in rows.chunks(PREDICT_CHUNK) {
        let mut b = SetBatch::with_feature_dim(support.cols());
        for q in chunk {
            b.push(support.iter_rows(), q, false)?;
        }
        b.finish();
        out.extend(net.predict_batch(&b)?);
    }
    Ok(out)
}

/// Zero-shot scorecard of `net` on one task's final test rows.
pub fn evaluate_task(net: &DeepSetsNet, task: &EvalTask) -> Result<TaskScorecard> {
    let test = &task.split.final_test;
    let preds = predict_task(net, &task.support(), &task.rows(test))?;
    let labels: Vec<bool> = preds.iter().map(Prediction::label).collect();
    scorecard(task.task.id.clone(), &labels, &task.labels_of(test))
}

/// Macro-averaged zero-shot scores over `tasks`.
pub fn evaluate(net: &DeepSetsNet, tasks: &[EvalTask]) -> Result<Scores> {
    let cards = tasks
        .iter()
        .map(|t| evaluate_task(net, t))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&cards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_test_split;
    use crate::model::NetConfig;
    use rand::Rng;

    /// Positives sit near +c, negatives near -c, in every dimension.
    pub(super) fn toy_task(id: &str, pos: usize, neg: usize, seed: u64) -> Task {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::zeros(0, 3);
        let mut y = Vec::new();
        for i in 0..pos + neg {
            let p = i < pos;
            let c = if p { 1.5 } else { -1.5 };
            let r: Vec<f64> = (0..3).map(|_| c + rng.random_range(-1.0..1.0)).collect();
            x.push_row(&r).unwrap();
            y.push(p);
        }
        Task::new(id, x, y).unwrap()
    }

    pub(super) fn toy_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            l1: 0.0,
            positive_weight: 1.0,
            epochs,
            batch_size: 32,
            episodes: EpisodeConfig {
                negatives_per_positive: 2.0,
                min_support: 3,
                max_support: 8,
                ..EpisodeConfig::default()
            },
            seed: 7,
        }
    }

    pub(super) fn toy_net(seed: u64) -> DeepSetsNet {
        DeepSetsNet::build(NetConfig::new(3, 8, 3, seed)).unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let half = Prediction::from_logits(0.0, 0.0);
        assert!((loss(&half, true, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((loss(&half, false, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((loss(&half, true, 100.0) - 100.0 * 2f64.ln()).abs() < 1e-12);
        let sure = Prediction::from_logits(-800.0, 800.0);
        assert!(loss(&sure, true, 1.0) < 1e-12);
        assert!((loss(&sure, false, 1.0) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_loss_matches_per_instance_mean() {
        let tasks = vec![toy_task("a", 12, 24, 1)];
        let specs = make_meta_instances(&tasks, &toy_cfg(1).episodes, 3).unwrap();
        let net = toy_net(0);
        let batch = build_batch(&specs, &tasks, 3).unwrap();
        let mut tape = Tape::new();
        let z = net.logits(&mut tape, &batch).unwrap();
        let l = tape.cross_entropy(z, batch.labels(), 1.0).unwrap();
        let got = tape.value(l).get(0, 0);
        let preds = net.predict_batch(&batch).unwrap();
        let want: f64 = preds
            .iter()
            .zip(batch.labels())
            .map(|(p, &y)| -(if y { p.positive.ln() } else { (1.0 - p.positive).ln() }))
            .sum::<f64>()
            / preds.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn separable_toy_task_is_learned() {
        let tasks = vec![toy_task("a", 30, 60, 2)];
        let out = meta_train(toy_net(1), &tasks, &[], &toy_cfg(50), &mut |_, _| Ok(())).unwrap();
        let net = out.best(Criterion::F1);
        let specs = make_meta_instances(&tasks, &toy_cfg(1).episodes, 99).unwrap();
        let batch = build_batch(&specs, &tasks, 3).unwrap();
        let preds: Vec<bool> = net.predict_batch(&batch).unwrap().iter().map(Prediction::label).collect();
        let f1 = scorecard("a", &preds, batch.labels()).unwrap().scores.f1;
        assert!(f1 > 0.99, "train F1 {f1}");

        // smoothed loss curve goes down
        let losses: Vec<f64> = out.log.iter().map(|l| l.mean_loss).collect();
        let smooth: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{smooth:?}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let tasks = vec![toy_task("a", 20, 40, 3), toy_task("b", 20, 40, 4)];
        let a = meta_train(toy_net(5), &tasks, &[], &toy_cfg(3), &mut |_, _| Ok(())).unwrap();
        let b = meta_train(toy_net(5), &tasks, &[], &toy_cfg(3), &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.best(Criterion::F1).param_hash(), b.best(Criterion::F1).param_hash());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn callback_sees_every_epoch_and_errors_propagate() {
        let tasks = vec![toy_task("a", 20, 40, 3)];
        let mut seen = Vec::new();
        meta_train(toy_net(0), &tasks, &[], &toy_cfg(4), &mut |l, _| {
            seen.push(l.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4]);
        let r = meta_train(toy_net(0), &tasks, &[], &toy_cfg(4), &mut |_, _| {
            Err(Error::State("stop".into()))
        });
        assert!(r.is_err());
    }

    #[test]
    fn exploding_learning_rate_is_reported_as_numerical() {
        let tasks = vec![toy_task("a", 20, 40, 3)];
        let mut cfg = toy_cfg(30);
        cfg.learning_rate = 1e300;
        let err = meta_train(toy_net(0), &tasks, &[], &cfg, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn prediction_is_read_only_and_support_order_free() {
        let task = toy_task("a", 40, 80, 9);
        let split = make_test_split(&task, 0.2, 1).unwrap();
        let et = EvalTask { task, split };
        let net = toy_net(3);
        let before = net.param_hash();
        let support = et.support();
        let queries = et.rows(&et.split.final_test);
        let a = predict_task(&net, &support, &queries).unwrap();
        assert_eq!(net.param_hash(), before);
        let mut order: Vec<usize> = (0..support.rows()).collect();
        order.reverse();
        let b = predict_task(&net, &support.select_rows(&order), &queries).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.positive - y.positive).abs() < 1e-12);
        }
        assert!(predict_task(&net, &Matrix::zeros(0, 3), &queries).is_err());
    }

    #[test]
    fn trained_model_beats_random_init_on_held_out_task() {
        let tasks: Vec<Task> = (0..3).map(|j| toy_task(&format!("t{j}"), 30, 60, 10 + j)).collect();
        let held = toy_task("h", 40, 400, 20);
        let split = make_test_split(&held, 0.1, 0).unwrap();
        let held = [EvalTask { task: held, split }];
        let out = meta_train(toy_net(2), &tasks, &[], &toy_cfg(20), &mut |_, _| Ok(())).unwrap();
        let trained = evaluate(out.best(Criterion::F1), &held).unwrap().f1;
        let random = evaluate(&toy_net(2), &held).unwrap().f1;
        assert!(trained > random, "{trained} vs {random}");
    }
}
