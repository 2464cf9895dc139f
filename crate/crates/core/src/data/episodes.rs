use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::Task;
use crate::error::{Error, Result};
use crate::model::{PairedInstance, SetBatch};
use crate::numerics::Matrix;
use crate::seed::derive_seed;

/// How meta-training instances are drawn from fully labeled tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Target negative instances per positive instance.
    pub negatives_per_positive: f64,
    pub min_support: usize,
    pub max_support: usize,
    /// Each positive is used this many times as a query, with a freshly
    /// sampled support set each time.
    pub positive_copies: usize,
    /// Caps positive queries per task per draw (after copying).
    pub max_positive_queries: Option<usize>,
    /// Random feature symmetries applied per training instance.
    pub augment: Option<Augmentation>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            negatives_per_positive: 50.0,
            min_support: 8,
            max_support: 100,
            positive_copies: 1,
            max_positive_queries: None,
            augment: None,
        }
    }
}

/// Feature symmetries of the task family. Each training instance gets its
/// own random map, applied to the support rows and the query alike, so the
/// network cannot key on where a particular task's positives sit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Flip each feature's sign with probability 1/2.
    pub reflect: bool,
    /// `[start, end)` ranges of interchangeable features, each shuffled
    /// independently.
    pub blocks: Vec<[usize; 2]>,
}

impl Augmentation {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut used = vec![false; n];
        for &[a, b] in &self.blocks {
            if a >= b || b > n {
                return Err(Error::InvalidArgument(format!(
                    "augmentation block [{a}, {b}) does not fit {n} features"
                )));
            }
            for u in &mut used[a..b] {
                if *u {
                    return Err(Error::InvalidArgument("augmentation blocks overlap".into()));
                }
                *u = true;
            }
        }
        Ok(())
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut source: Vec<usize> = (0..n).collect();
        for &[a, b] in &self.blocks {
            source[a..b].shuffle(rng);
        }
        let flip = (0..n).map(|_| self.reflect && rng.random_bool(0.5)).collect();
        FeatureMap { source, flip }
    }
}

/// `out[d] = ±x[source[d]]`, negated where `flip[d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub source: Vec<usize>,
    pub flip: Vec<bool>,
}

impl FeatureMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.source
            .iter()
            .zip(&self.flip)
            .map(|(&s, &f)| if f { -x[s] } else { x[s] })
            .collect()
    }
}

/// A meta-training instance by reference: rows of `tasks[task]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceSpec {
    pub task: usize,
    pub query: usize,
    pub support: Vec<usize>,
    pub label: bool,
    pub map: Option<FeatureMap>,
}

impl InstanceSpec {
    pub fn materialize(&self, tasks: &[Task]) -> Result<PairedInstance> {
        let t = &tasks[self.task];
        match &self.map {
            None => {
                let support = t.features().select_rows(&self.support);
                PairedInstance::new(&support, t.example(self.query), Some(self.label), self.task)
            }
            Some(m) => {
                let rows: Vec<Vec<f64>> = self.support.iter().map(|&i| m.apply(t.example(i))).collect();
                let support = Matrix::from_rows(&rows)?;
                PairedInstance::new(&support, &m.apply(t.example(self.query)), Some(self.label), self.task)
            }
        }
    }

    pub fn push_into(&self, batch: &mut SetBatch, tasks: &[Task]) -> Result<()> {
        let t = &tasks[self.task];
        match &self.map {
            None => batch.push(
                self.support.iter().map(|&i| t.example(i)),
                t.example(self.query),
                self.label,
            ),
            Some(m) => {
                let rows: Vec<Vec<f64>> = self.support.iter().map(|&i| m.apply(t.example(i))).collect();
                batch.push(rows.iter().map(Vec::as_slice), &m.apply(t.example(self.query)), self.label)
            }
        }
    }
}

pub(crate) fn sample_support(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    exclude: Option<usize>,
    cfg: &EpisodeConfig,
) -> Vec<usize> {
    let candidates: Vec<usize> = match exclude {
        Some(q) => pool.iter().copied().filter(|&i| i != q).collect(),
        None => pool.to_vec(),
    };
    let hi = candidates.len().min(cfg.max_support);
    let lo = cfg.min_support.min(hi).max(1);
    let size = rng.random_range(lo..=hi);
    let mut picked: Vec<usize> = index::sample(rng, candidates.len(), size)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Draws one task's instances: every positive as a query (copied and
/// capped per `cfg`), plus uniformly sub-sampled negatives at the
/// configured ratio. A positive query never appears in its own support set.
pub fn task_instances(
    tasks: &[Task],
    task_index: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Vec<InstanceSpec> {
    let t = &tasks[task_index];
    let positives = t.positive_indices();
    if positives.len() < cfg.min_support + 1 {
        log::warn!(
            "skipping task {}: {} positives, need at least {}",
            t.id,
            positives.len(),
            cfg.min_support + 1
        );
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task_index as u64));
    let mut queries: Vec<usize> = (0..cfg.positive_copies.max(1))
        .flat_map(|_| positives.iter().copied())
        .collect();
    if let Some(cap) = cfg.max_positive_queries {
        if queries.len() > cap {
            queries.shuffle(&mut rng);
            queries.truncate(cap);
            queries.sort_unstable();
        }
    }
    let mut out = Vec::new();
    for &q in &queries {
        out.push(InstanceSpec {
            task: task_index,
            query: q,
            support: sample_support(&mut rng, &positives, Some(q), cfg),
            label: true,
            map: None,
        });
    }
    let negatives = t.query_indices();
    let wanted = (queries.len() as f64 * cfg.negatives_per_positive).round() as usize;
    if wanted > negatives.len() {
        log::warn!(
            "task {}: only {} negatives for {} requested",
            t.id,
            negatives.len(),
            wanted
        );
    }
    let take = wanted.min(negatives.len());
    let mut picked: Vec<usize> = index::sample(&mut rng, negatives.len(), take)
        .into_iter()
        .map(|i| negatives[i])
        .collect();
    picked.sort_unstable();
    for q in picked {
        out.push(InstanceSpec {
            task: task_index,
            query: q,
            support: sample_support(&mut rng, &positives, None, cfg),
            label: false,
            map: None,
        });
    }
    if let Some(aug) = &cfg.augment {
        let n = t.feature_dim();
        for inst in &mut out {
            inst.map = Some(aug.draw(n, &mut rng));
        }
    }
    out
}

/// Instance stream over all tasks, merged in task order. A pure function
/// of `(tasks, cfg, seed)`; call with a new seed each epoch to reshuffle
/// the negative sub-sample.
pub fn make_meta_instances(tasks: &[Task], cfg: &EpisodeConfig, seed: u64) -> Result<Vec<InstanceSpec>> {
    if cfg.min_support == 0 || cfg.max_support < cfg.min_support {
        return Err(Error::InvalidArgument(format!(
            "support range [{}, {}] is invalid",
            cfg.min_support, cfg.max_support
        )));
    }
    if !(cfg.negatives_per_positive > 0.0) {
        return Err(Error::InvalidArgument("negatives_per_positive must be positive".into()));
    }
    if let (Some(aug), Some(t)) = (&cfg.augment, tasks.first()) {
        aug.validate(t.feature_dim())?;
    }
    Ok((0..tasks.len())
        .flat_map(|j| task_instances(tasks, j, cfg, seed))
        .collect())
}

/// Realized negatives per positive in an instance stream.
pub fn realized_ratio(instances: &[InstanceSpec]) -> f64 {
    let pos = instances.iter().filter(|i| i.label).count();
    (instances.len() - pos) as f64 / pos.max(1) as f64
}

/// Pairs every query with the full support set.
pub fn full_support_batch(support: &Matrix, queries: &[&[f64]]) -> Result<SetBatch> {
    let mut b = SetBatch::with_feature_dim(support.cols());
    for q in queries {
        b.push(support.iter_rows(), q, false)?;
    }
    b.finish();
    Ok(b)
}
