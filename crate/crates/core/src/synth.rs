//! Synthetic one-class tasks shaped like stellar streams.
//!
//! Dimensions 0 and 1 play the role of sky position: positives scatter
//! tightly around a random Bézier curve while negatives fill the bounding
//! box uniformly. The remaining dimensions play the role of proper motions
//! and colors: positives form a compact Gaussian cluster, negatives a broad
//! uniform + Gaussian mixture. Every task is a pure function of its seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_meta_split, write_task_csv, Augmentation, MetaSplit, Task, TaskSplit};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::derive_seed;

/// Number of leading "position" dimensions holding the curve.
pub const CURVE_DIMS: usize = 2;
/// Positive jitter is truncated at this many standard deviations.
pub const JITTER_TRUNCATION: f64 = 3.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub positives_min: usize,
    pub positives_max: usize,
    /// Negatives per positive.
    pub ratio: f64,
    /// Degree of the Bézier curve in the position dimensions.
    pub curve_order: usize,
    /// Jitter around the curve, as a fraction of `box_scale`.
    pub curve_noise: f64,
    /// Positive cluster spread, in units of the background spread.
    pub cluster_noise: f64,
    /// Half-width of the position bounding box.
    pub box_scale: f64,
    /// Spread of the background in the cluster dimensions.
    pub background_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            feature_dim: 10,
            positives_min: 90,
            positives_max: 920,
            ratio: 150.0,
            curve_order: 3,
            curve_noise: 0.02,
            cluster_noise: 0.25,
            box_scale: 10.0,
            background_std: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.feature_dim <= CURVE_DIMS {
            return bad("feature_dim must exceed the 2 position dimensions");
        }
        if self.positives_min == 0 || self.positives_max < self.positives_min {
            return bad("positives range is empty");
        }
        if !(self.ratio >= 1.0) {
            return bad("ratio must be at least 1");
        }
        if self.curve_order == 0 {
            return bad("curve order must be at least 1");
        }
        if !(self.curve_noise > 0.0 && self.cluster_noise > 0.0 && self.background_std > 0.0) {
            return bad("noise scales must be positive");
        }
        if !(self.box_scale > 0.0) {
            return bad("box scale must be positive");
        }
        Ok(())
    }
}

/// Everything needed to regenerate one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskRecipe {
    pub task_id: String,
    pub positives: usize,
    pub negatives: usize,
    /// Bézier control points in the position dimensions.
    pub control_points: Vec<[f64; 2]>,
    /// Standard deviation of the jitter around the curve.
    pub curve_sigma: f64,
    pub cluster_center: Vec<f64>,
    pub cluster_std: Vec<f64>,
    pub background_center: Vec<f64>,
    pub background_std: Vec<f64>,
    pub box_scale: f64,
    /// Probability that a background coordinate is uniform rather than Gaussian.
    pub uniform_weight: f64,
    pub sample_seed: u64,
}

impl SyntheticTaskRecipe {
    /// Point on the curve at parameter `t ∈ [0, 1]` (de Casteljau).
    pub fn curve_point(&self, t: f64) -> [f64; 2] {
        let mut pts = self.control_points.clone();
        while pts.len() > 1 {
            for i in 0..pts.len() - 1 {
                pts[i] = [
                    (1.0 - t) * pts[i][0] + t * pts[i + 1][0],
                    (1.0 - t) * pts[i][1] + t * pts[i + 1][1],
                ];
            }
            pts.pop();
        }
        pts[0]
    }

    /// Euclidean distance from a position to the curve, by dense sampling.
    pub fn distance_to_curve(&self, p: &[f64]) -> f64 {
        const STEPS: usize = 2000;
        (0..=STEPS)
            .map(|s| {
                let c = self.curve_point(s as f64 / STEPS as f64);
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn feature_dim(&self) -> usize {
        CURVE_DIMS + self.cluster_center.len()
    }

    fn sample_positive(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let t: f64 = rng.random();
        let c = self.curve_point(t);
        let (dx, dy) = loop {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            if (dx * dx + dy * dy).sqrt() <= JITTER_TRUNCATION {
                break (dx, dy);
            }
        };
        let mut x = vec![c[0] + self.curve_sigma * dx, c[1] + self.curve_sigma * dy];
        for (m, s) in self.cluster_center.iter().zip(&self.cluster_std) {
            let z: f64 = rng.sample(StandardNormal);
            x.push(m + s * z.clamp(-JITTER_TRUNCATION, JITTER_TRUNCATION));
        }
        x
    }

    fn sample_negative(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let b = self.box_scale;
        let mut x = vec![rng.random_range(-b..b), rng.random_range(-b..b)];
        for (m, s) in self.background_center.iter().zip(&self.background_std) {
            let v = if rng.random_bool(self.uniform_weight) {
                rng.random_range(m - 2.5 * s..m + 2.5 * s)
            } else {
                let z: f64 = rng.sample(StandardNormal);
                m + s * z
            };
            x.push(v);
        }
        x
    }

    /// Samples the task's rows (shuffled) from the recipe alone.
    pub fn realize(&self) -> Result<Task> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
        let mut rows: Vec<(Vec<f64>, bool)> = Vec::with_capacity(self.positives + self.negatives);
        for _ in 0..self.positives {
            rows.push((self.sample_positive(&mut rng), true));
        }
        for _ in 0..self.negatives {
            rows.push((self.sample_negative(&mut rng), false));
        }
        rows.shuffle(&mut rng);
        let n = self.feature_dim();
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut labels = Vec::with_capacity(rows.len());
        for (x, y) in rows {
            data.extend(x);
            labels.push(y);
        }
        Task::new(self.task_id.clone(), Matrix::from_vec(labels.len(), n, data)?, labels)
    }
}

fn draw_recipe(cfg: &GeneratorConfig, task_id: &str, seed: u64) -> SyntheticTaskRecipe {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let b = cfg.box_scale;
    let positives = rng.random_range(cfg.positives_min..=cfg.positives_max);
    let control_points = (0..=cfg.curve_order)
        .map(|_| [rng.random_range(-0.8 * b..0.8 * b), rng.random_range(-0.8 * b..0.8 * b)])
        .collect();
    let k = cfg.feature_dim - CURVE_DIMS;
    let sd = cfg.background_std;
    let mut cluster_center = Vec::with_capacity(k);
    let mut cluster_std = Vec::with_capacity(k);
    let mut background_center = Vec::with_capacity(k);
    let mut background_std = Vec::with_capacity(k);
    for _ in 0..k {
        let bg_c: f64 = rng.random_range(-0.5 * sd..0.5 * sd);
        let bg_s = sd * rng.random_range(0.8..1.2);
        let z: f64 = rng.sample(StandardNormal);
        cluster_center.push(bg_c + 1.2 * bg_s * z.clamp(-2.0, 2.0));
        cluster_std.push(cfg.cluster_noise * bg_s * rng.random_range(0.5..1.5));
        background_center.push(bg_c);
        background_std.push(bg_s);
    }
    SyntheticTaskRecipe {
        task_id: task_id.to_string(),
        positives,
        negatives: (positives as f64 * cfg.ratio).round() as usize,
        control_points,
        curve_sigma: cfg.curve_noise * b,
        cluster_center,
        cluster_std,
        background_center,
        background_std,
        box_scale: b,
        uniform_weight: 0.5,
        sample_seed: derive_seed(seed, 1),
    }
}

/// Symmetries of the generated family: every feature's sign, the two curve
/// features, and the cluster features among themselves.
pub fn symmetries(cfg: &GeneratorConfig) -> Augmentation {
    let mut blocks = vec![[0, CURVE_DIMS]];
    if cfg.feature_dim > CURVE_DIMS {
        blocks.push([CURVE_DIMS, cfg.feature_dim]);
    }
    Augmentation {
        reflect: true,
        blocks,
    }
}

pub fn generate_task(cfg: &GeneratorConfig, task_id: &str, seed: u64) -> Result<(Task, SyntheticTaskRecipe)> {
    cfg.validate()?;
    let recipe = draw_recipe(cfg, task_id, seed);
    Ok((recipe.realize()?, recipe))
}

/// Task counts for a benchmark.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 46,
            validation: 7,
            test: 8,
        }
    }
}

impl std::str::FromStr for SplitCounts {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('/')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("expected A/B/C task counts, got {s}")))?;
        match parts[..] {
            [train, validation, test] => Ok(SplitCounts {
                train,
                validation,
                test,
            }),
            _ => Err(Error::InvalidArgument(format!("expected A/B/C task counts, got {s}"))),
        }
    }
}

pub fn task_id(index: usize) -> String {
    format!("stream_{index:03}")
}

/// Generates a whole benchmark in memory: tasks in train, validation, test order.
pub fn generate_tasks(
    cfg: &GeneratorConfig,
    counts: SplitCounts,
    master_seed: u64,
) -> Result<(Vec<Task>, Vec<SyntheticTaskRecipe>, MetaSplit)> {
    if counts.train == 0 || counts.validation == 0 || counts.test == 0 {
        return Err(Error::InvalidArgument("every split needs at least one task".into()));
    }
    let total = counts.train + counts.validation + counts.test;
    let mut tasks = Vec::with_capacity(total);
    let mut recipes = Vec::with_capacity(total);
    let mut split = MetaSplit::default();
    for i in 0..total {
        let id = task_id(i);
        let (t, r) = generate_task(cfg, &id, derive_seed(master_seed, i as u64))?;
        tasks.push(t);
        recipes.push(r);
        if i < counts.train {
            split.train.push(id);
        } else if i < counts.train + counts.validation {
            split.validation.push(id);
        } else {
            split.test.push(id);
        }
    }
    Ok((tasks, recipes, split))
}

pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::AlreadyExists(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `tasks/<id>.csv`, `splits.csv`, `recipes.json` and
/// `generator.json` under `out`.
pub fn generate_benchmark(
    cfg: &GeneratorConfig,
    counts: SplitCounts,
    master_seed: u64,
    out: &Path,
    force: bool,
) -> Result<MetaSplit> {
    let (tasks, recipes, split) = generate_tasks(cfg, counts, master_seed)?;
    prepare_output_dir(out, force)?;
    let task_dir = out.join("tasks");
    std::fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
    for t in &tasks {
        write_task_csv(t, &task_dir.join(format!("{}.csv", t.id)))?;
    }
    write_meta_split(&split, &out.join("splits.csv"))?;
    write_json(&out.join("recipes.json"), &recipes)?;
    write_json(&out.join("generator.json"), cfg)?;
    Ok(split)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Distribution shift applied to a generated task, plus the sizes of the
/// parts of the resulting evaluation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftDescriptor {
    /// Multiplies the cluster spread on even cluster dimensions.
    pub tight_scale: f64,
    /// Multiplies the cluster spread on odd cluster dimensions.
    pub wide_scale: f64,
    /// Multiplies the jitter around the curve.
    pub curve_noise_scale: f64,
    /// Moves the cluster center away from the background center, in units
    /// of the background spread.
    pub center_offset: f64,
    pub support_size: usize,
    pub train_negative_ratio: f64,
    pub test_ratio: f64,
    pub pool_positives: usize,
    pub test_positives: usize,
}

impl Default for ShiftDescriptor {
    fn default() -> Self {
        ShiftDescriptor {
            tight_scale: 0.3,
            wide_scale: 3.0,
            curve_noise_scale: 2.0,
            center_offset: 0.0,
            support_size: 197,
            train_negative_ratio: 400.0,
            test_ratio: 150.0,
            pool_positives: 197,
            test_positives: 197,
        }
    }
}

impl ShiftDescriptor {
    /// No change to the generating distribution; default sizes.
    pub fn identity() -> Self {
        ShiftDescriptor {
            tight_scale: 1.0,
            wide_scale: 1.0,
            curve_noise_scale: 1.0,
            center_offset: 0.0,
            ..ShiftDescriptor::default()
        }
    }
}

/// A shifted evaluation task together with its fixed partition.
#[derive(Clone, Debug)]
pub struct ShiftedTask {
    pub task: Task,
    pub split: TaskSplit,
    pub recipe: SyntheticTaskRecipe,
}

/// Builds a distribution-shifted evaluation task: support positives, a
/// negative training pool at `train_negative_ratio`, and self-labeling and
/// final-test pools at `test_ratio`.
pub fn generate_shifted_task(
    cfg: &GeneratorConfig,
    shift: &ShiftDescriptor,
    task_id: &str,
    seed: u64,
) -> Result<ShiftedTask> {
    cfg.validate()?;
    if shift.support_size == 0 || shift.test_positives == 0 {
        return Err(Error::InvalidArgument("shifted task needs support and test positives".into()));
    }
    let mut recipe = draw_recipe(cfg, task_id, seed);
    recipe.curve_sigma *= shift.curve_noise_scale;
    for (d, s) in recipe.cluster_std.iter_mut().enumerate() {
        *s *= if d % 2 == 0 { shift.tight_scale } else { shift.wide_scale };
    }
    if shift.center_offset != 0.0 {
        for ((c, b), s) in recipe
            .cluster_center
            .iter_mut()
            .zip(&recipe.background_center)
            .zip(&recipe.background_std)
        {
            let dir = if *c >= *b { 1.0 } else { -1.0 };
            *c += dir * shift.center_offset * s;
        }
    }
    let parts_pos = [shift.support_size, shift.pool_positives, shift.test_positives];
    let parts_neg = [
        0,
        (shift.support_size as f64 * shift.train_negative_ratio).round() as usize,
        (shift.pool_positives as f64 * shift.test_ratio).round() as usize,
        (shift.test_positives as f64 * shift.test_ratio).round() as usize,
    ];
    recipe.positives = parts_pos.iter().sum();
    recipe.negatives = parts_neg.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(recipe.sample_seed);
    // part 0 support, 1 baseline negatives, 2 self-label pool, 3 final test
    let mut rows: Vec<(Vec<f64>, bool, usize)> = Vec::new();
    for (part, &count) in [0usize, 2, 3].iter().zip(&parts_pos) {
        for _ in 0..count {
            rows.push((recipe.sample_positive(&mut rng), true, *part));
        }
    }
    for (part, &count) in parts_neg.iter().enumerate() {
        for _ in 0..count {
            rows.push((recipe.sample_negative(&mut rng), false, part));
        }
    }
    rows.shuffle(&mut rng);
    let n = recipe.feature_dim();
    let mut data = Vec::with_capacity(rows.len() * n);
    let mut labels = Vec::with_capacity(rows.len());
    let mut split = TaskSplit::default();
    for (i, (x, y, part)) in rows.into_iter().enumerate() {
        data.extend(x);
        labels.push(y);
        match part {
            0 => split.support.push(i),
            1 => split.baseline_negatives.push(i),
            2 => split.self_label_pool.push(i),
            _ => split.final_test.push(i),
        }
    }
    let task = Task::new(task_id, Matrix::from_vec(labels.len(), n, data)?, labels)?;
    Ok(ShiftedTask {
        task,
        split,
        recipe,
    })
}
