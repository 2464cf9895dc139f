use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::data::{
    load_tasks, make_test_split, read_meta_split, read_task_split, write_task_csv, write_task_split,
    EvalTask, FormatDescriptor, MetaSplit, Task,
};
use crate::error::{Error, Result};
use crate::forest::{baseline_predictions, rf_grid_search, Baseline, ForestConfig};
use crate::metrics::{
    aggregate, parse_results_csv, render_results_csv, render_results_table, Criterion, ResultRow,
    SelectionReport, TaskScorecard,
};
use crate::model::DeepSetsNet;
use crate::numerics::Checkpoint;
use crate::seed::derive_seed;
use crate::synth::{generate_benchmark, generate_shifted_task, prepare_output_dir, write_json};
use crate::train::{
    evaluate_task, fine_tune, grid_search, FineTuneConfig, EPOCH_LOG_HEADER,
};

const SHIFTED_DATASET: &str = "shifted";
const SHIFTED_TASK: &str = "shifted_000";

/// Seed tags, one per consumer of the master seed.
mod tag {
    pub const BENCHMARK: u64 = 1;
    pub const TEST_SPLITS: u64 = 2;
    pub const SHIFTED: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const BASELINE: u64 = 6;
    pub const FINETUNE: u64 = 7;
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Select,
    Eval,
    Finetune,
    Baseline,
    Report,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Select => "select",
            Stage::Eval => "eval",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
            Stage::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::Generate => "data",
            other => other.command(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    stage: String,
    config_hash: String,
}

/// A run directory together with the configuration driving it.
#[derive(Clone, Debug)]
pub struct Run {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    hash: String,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Run {
            root: root.into(),
            config,
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.root.join(s.dir())
    }

    fn path(&self, s: Stage, name: &str) -> PathBuf {
        self.stage_dir(s).join(name)
    }

    fn seed(&self, t: u64) -> u64 {
        derive_seed(self.config.seed, t)
    }

    /// Checks that stage `s` completed under this configuration.
    fn require(&self, s: Stage) -> Result<()> {
        let p = self.path(s, "provenance.json");
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p,
                stage: s.command(),
            });
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let prov: Provenance = serde_json::from_str(&text)?;
        if prov.config_hash != self.hash {
            return Err(Error::State(format!(
                "{} was produced by config {} but the current config is {}; re-run `{}`",
                p.display(),
                &prov.config_hash[..12.min(prov.config_hash.len())],
                &self.hash[..12],
                s.command()
            )));
        }
        Ok(())
    }

    /// Empties the stage directory; provenance is written last by `finish`.
    fn begin(&self, s: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(s);
        prepare_output_dir(&dir, true)?;
        Ok(dir)
    }

    fn finish(&self, s: Stage) -> Result<()> {
        write_json(
            &self.path(s, "provenance.json"),
            &Provenance {
                stage: s.command().into(),
                config_hash: self.hash.clone(),
            },
        )
    }

    fn write(&self, s: Stage, name: &str, text: &str) -> Result<()> {
        let p = self.path(s, name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn read(&self, s: Stage, name: &str) -> Result<String> {
        let p = self.path(s, name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    /// Tasks keyed by id, normalized per task.
    fn load_benchmark(&self) -> Result<(BTreeMap<String, Task>, MetaSplit)> {
        self.require(Stage::Generate)?;
        let split = read_meta_split(&self.path(Stage::Generate, "splits.csv"))?;
        split.validate()?;
        let tasks = load_tasks(&self.path(Stage::Generate, "tasks"), &FormatDescriptor::default())?;
        let tasks = tasks
            .into_iter()
            .map(|t| Ok((t.id.clone(), t.normalize()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok((tasks, split))
    }

    fn eval_tasks(&self, tasks: &BTreeMap<String, Task>, ids: &[String]) -> Result<Vec<EvalTask>> {
        ids.iter()
            .map(|id| {
                let task = tasks
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("task {id} listed in splits.csv has no data")))?
                    .clone();
                let split = read_task_split(&self.path(Stage::Generate, &format!("task_splits/{id}.csv")))?;
                split.check_partition(task.len())?;
                Ok(EvalTask { task, split })
            })
            .collect()
    }

    fn train_tasks(&self, tasks: &BTreeMap<String, Task>, ids: &[String]) -> Result<Vec<Task>> {
        ids.iter()
            .map(|id| {
                tasks
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("task {id} listed in splits.csv has no data")))
            })
            .collect()
    }

    fn shifted_task(&self) -> Result<EvalTask> {
        let dir = self.path(Stage::Generate, "shifted");
        let mut tasks = load_tasks(&dir.join("task.csv"), &FormatDescriptor::default())?;
        let task = tasks
            .pop()
            .ok_or_else(|| Error::Data("shifted task file is empty".into()))?
            .normalize()?;
        let split = read_task_split(&dir.join("split.csv"))?;
        split.check_partition(task.len())?;
        Ok(EvalTask { task, split })
    }

    fn selected_net(&self, c: Criterion) -> Result<DeepSetsNet> {
        self.require(Stage::Select)?;
        let ck = Checkpoint::read(&self.path(Stage::Select, &format!("meta_{}.ckpt", c.key())))?;
        DeepSetsNet::from_checkpoint(&ck)
    }
}

fn meta_label(c: Criterion) -> String {
    format!("best meta {}", c.title())
}

fn per_task_csv(rows: &[(String, String, String, TaskScorecard)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset", "model", "selection", "task"];
    header.extend(Criterion::ALL.iter().map(|c| c.key()));
    w.write_record(&header)?;
    for (d, m, s, card) in rows {
        let mut rec = vec![d.clone(), m.clone(), s.clone(), card.task.clone()];
        rec.extend(card.scores.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// Benchmark tasks, split manifests, per-task evaluation splits and the
/// shifted task.
pub fn cmd_generate(run: &Run, force: bool) -> Result<()> {
    let cfg = &run.config;
    std::fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    let cfg_path = run.root.join("config.json");
    if cfg_path.exists() && !force {
        let existing = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        if existing != cfg.to_json()? {
            return Err(Error::AlreadyExists(cfg_path));
        }
    }
    let data = run.stage_dir(Stage::Generate);
    let split = generate_benchmark(
        &cfg.generator,
        cfg.tasks,
        run.seed(tag::BENCHMARK),
        &data,
        force,
    )?;
    std::fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;

    let tasks = load_tasks(&data.join("tasks"), &FormatDescriptor::default())?;
    let split_dir = data.join("task_splits");
    std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    for (j, id) in split.validation.iter().chain(&split.test).enumerate() {
        let task = tasks
            .iter()
            .find(|t| &t.id == id)
            .ok_or_else(|| Error::Data(format!("generated task {id} is missing")))?;
        let s = make_test_split(task, cfg.support_fraction, derive_seed(run.seed(tag::TEST_SPLITS), j as u64))?;
        write_task_split(&s, &split_dir.join(format!("{id}.csv")))?;
    }

    let shifted = generate_shifted_task(&cfg.generator, &cfg.shift, SHIFTED_TASK, run.seed(tag::SHIFTED))?;
    let sdir = data.join("shifted");
    std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    write_task_csv(&shifted.task, &sdir.join("task.csv"))?;
    write_task_split(&shifted.split, &sdir.join("split.csv"))?;
    write_json(&sdir.join("recipe.json"), &shifted.recipe)?;
    write_json(&sdir.join("shift.json"), &cfg.shift)?;
    run.finish(Stage::Generate)?;
    log::info!(
        "generated {} tasks under {}",
        split.len(),
        data.display()
    );
    Ok(())
}

/// Trains every grid configuration and writes the meta-validation report.
pub fn cmd_train(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let (tasks, split) = run.load_benchmark()?;
    let train = run.train_tasks(&tasks, &split.train)?;
    let val = run.eval_tasks(&tasks, &split.validation)?;
    let dir = run.begin(Stage::Train)?;
    let n = train[0].feature_dim();
    let net_cfg = cfg.net.net_config(n, run.seed(tag::NET_INIT));
    let base = cfg.base_train(run.seed(tag::TRAIN));
    let configs = cfg.train_grid.configs(&base);
    for (i, c) in configs.iter().enumerate() {
        let d = dir.join(format!("runs/{i:02}"));
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        std::fs::write(d.join("log.csv"), format!("{EPOCH_LOG_HEADER}\n")).map_err(|e| Error::io(&d, e))?;
        write_json(&d.join("train.json"), c)?;
    }
    let hash = run.config_hash().to_string();
    let every = cfg.train.checkpoint_every;
    let hook = |i: usize, log: &crate::train::EpochLog, net: &DeepSetsNet| -> Result<()> {
        use std::io::Write;
        let d = dir.join(format!("runs/{i:02}"));
        let p = d.join("log.csv");
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{}", log.csv_line()).map_err(|e| Error::io(&p, e))?;
        let ck = net.to_checkpoint(&hash);
        ck.write(&d.join("latest.ckpt"))?;
        if every > 0 && log.epoch.is_multiple_of(every) {
            ck.write(&d.join(format!("epoch_{:03}.ckpt", log.epoch)))?;
        }
        Ok(())
    };
    let out = grid_search(&net_cfg, &cfg.train_grid, &base, &train, &val, &hook)?;
    for (i, r) in out.runs.iter().enumerate() {
        for c in Criterion::ALL {
            r.best(c)
                .to_checkpoint(&hash)
                .write(&dir.join(format!("runs/{i:02}/best_{}.ckpt", c.key())))?;
        }
    }
    run.write(Stage::Train, "report.csv", &out.report.render_csv()?)?;
    run.write(Stage::Train, "report.txt", &out.report.render_text())?;
    run.finish(Stage::Train)
}

/// Picks the winning configuration per criterion from the training report.
pub fn cmd_select(run: &Run) -> Result<()> {
    run.require(Stage::Train)?;
    let report_path = run.path(Stage::Train, "report.csv");
    let report = SelectionReport::parse_csv(&run.read(Stage::Train, "report.csv")?, &report_path)?;
    run.begin(Stage::Select)?;
    let mut table = String::from("criterion,index,candidate,score\n");
    let mut text = String::new();
    for c in Criterion::ALL {
        let i = report.best(c);
        let src = run.path(Stage::Train, &format!("runs/{i:02}/best_{}.ckpt", c.key()));
        let ck = Checkpoint::read(&src)?;
        ck.write(&run.path(Stage::Select, &format!("meta_{}.ckpt", c.key())))?;
        let _ = writeln!(table, "{},{i},{},{}", c.key(), report.candidates[i], report.scores[i].get(c));
        let _ = writeln!(
            text,
            "{:<9} config #{i:<3} {}  meta-validation {:.4}",
            c.title(),
            report.candidates[i],
            report.scores[i].get(c)
        );
    }
    run.write(Stage::Select, "selection.csv", &table)?;
    run.write(Stage::Select, "selection.txt", &text)?;
    run.finish(Stage::Select)
}

/// Zero-shot scores of the selected meta models on the test tasks' final
/// test rows.
pub fn cmd_eval(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let (tasks, split) = run.load_benchmark()?;
    let test = run.eval_tasks(&tasks, &split.test)?;
    let nets = cfg
        .selection
        .iter()
        .map(|&c| Ok((c, run.selected_net(c)?)))
        .collect::<Result<Vec<_>>>()?;
    run.begin(Stage::Eval)?;
    let mut rows = Vec::new();
    let mut per_task = Vec::new();
    for (c, net) in &nets {
        let cards = test
            .iter()
            .map(|t| evaluate_task(net, t))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ResultRow {
            dataset: cfg.dataset.clone(),
            model: "Meta DS".into(),
            selection: meta_label(*c),
            scores: aggregate(&cards)?,
        });
        per_task.extend(cards.into_iter().map(|card| (cfg.dataset.clone(), "Meta DS".to_string(), meta_label(*c), card)));
    }
    run.write(Stage::Eval, "results.csv", &render_results_csv(&rows)?)?;
    run.write(Stage::Eval, "per_task.csv", &per_task_csv(&per_task)?)?;
    run.finish(Stage::Eval)
}

fn forest_rows(
    run: &Run,
    kind: Baseline,
    model: &str,
    grid_file: &str,
    val: &[EvalTask],
    test: &[EvalTask],
    per_task: &mut Vec<(String, String, String, TaskScorecard)>,
) -> Result<ResultRow> {
    let cfg = &run.config;
    let seed = run.seed(tag::BASELINE);
    let (combos, report) = rf_grid_search(&cfg.forest_grid, val, kind, derive_seed(seed, 0))?;
    run.write(Stage::Baseline, grid_file, &report.render_csv()?)?;
    let chosen: &ForestConfig = &combos[report.best(cfg.forest_selection)];
    log::info!("{model}: {}", chosen.describe());
    let cards = test
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let pred = baseline_predictions(chosen, kind, t, derive_seed(derive_seed(seed, 1), j as u64))?;
            crate::metrics::scorecard(t.task.id.clone(), &pred, &t.labels_of(&t.split.final_test))
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = meta_label(cfg.forest_selection);
    let row = ResultRow {
        dataset: cfg.dataset.clone(),
        model: model.into(),
        selection: selection.clone(),
        scores: aggregate(&cards)?,
    };
    per_task.extend(cards.into_iter().map(|c| (cfg.dataset.clone(), model.to_string(), selection.clone(), c)));
    Ok(row)
}

/// Random Forest and self-labeled Random Forest with hyperparameters shared
/// across test tasks, chosen on the validation tasks.
pub fn cmd_baseline(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let (tasks, split) = run.load_benchmark()?;
    let val = run.eval_tasks(&tasks, &split.validation)?;
    let test = run.eval_tasks(&tasks, &split.test)?;
    run.begin(Stage::Baseline)?;
    let mut per_task = Vec::new();
    let mut rows = vec![forest_rows(run, Baseline::Plain, "RF", "rf_grid.csv", &val, &test, &mut per_task)?];
    if cfg.stages.self_label {
        let kind = Baseline::SelfLabel {
            max_iterations: cfg.self_label_iterations,
        };
        rows.push(forest_rows(run, kind, "RF Self-Lab", "self_label_grid.csv", &val, &test, &mut per_task)?);
    }
    run.write(Stage::Baseline, "results.csv", &render_results_csv(&rows)?)?;
    run.write(Stage::Baseline, "per_task.csv", &per_task_csv(&per_task)?)?;
    run.finish(Stage::Baseline)
}

/// Zero-shot and fine-tuned scores on the shifted task. For each selection
/// criterion the imbalance factor is chosen by the same criterion on the
/// task's training split.
pub fn cmd_finetune(run: &Run) -> Result<()> {
    let cfg = &run.config;
    run.require(Stage::Generate)?;
    let task = run.shifted_task()?;
    let nets = cfg
        .selection
        .iter()
        .map(|&c| Ok((c, run.selected_net(c)?)))
        .collect::<Result<Vec<_>>>()?;
    run.begin(Stage::Finetune)?;
    let base = cfg.base_train(run.seed(tag::FINETUNE));
    let lr_of = |c: Criterion| -> Result<f64> {
        let text = run.read(Stage::Select, "selection.csv")?;
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{},", c.key())))
            .ok_or_else(|| Error::Data(format!("selection.csv has no {} row", c.key())))?;
        let idx: usize = line.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| {
            Error::Data(format!("bad selection row `{line}`"))
        })?;
        let p = run.path(Stage::Train, &format!("runs/{idx:02}/train.json"));
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let tc: crate::train::TrainConfig = serde_json::from_str(&text)?;
        Ok(tc.learning_rate)
    };
    let mut rows = Vec::new();
    let mut factors = String::from("selection,factor,epochs,chosen_epoch,train_score,test_f1\n");
    for (c, net) in &nets {
        let zero = evaluate_task(net, &task)?;
        rows.push(ResultRow {
            dataset: SHIFTED_DATASET.into(),
            model: "Meta DS".into(),
            selection: meta_label(*c),
            scores: zero.scores,
        });
        let lr = lr_of(*c)?;
        let mut best: Option<(f64, TaskScorecard)> = None;
        for (fi, &factor) in cfg.finetune.factors.iter().enumerate() {
            let ftc = FineTuneConfig {
                passes: cfg.finetune.passes,
                seed: derive_seed(base.seed, fi as u64),
                ..FineTuneConfig::from_train(
                    &crate::train::TrainConfig {
                        learning_rate: lr,
                        ..base.clone()
                    },
                    factor,
                )
            };
            let out = fine_tune(net, &task, &ftc, *c)?;
            let train_score = out.chosen().train_scores.get(*c);
            let card = evaluate_task(&out.net, &task)?;
            let _ = writeln!(
                factors,
                "{},{factor},{},{},{train_score},{}",
                c.key(),
                out.history.len() - 1,
                out.chosen_epoch,
                card.scores.f1
            );
            if best.as_ref().is_none_or(|b| train_score > b.0) {
                best = Some((train_score, card));
            }
        }
        let (_, card) = best.expect("at least one factor");
        rows.push(ResultRow {
            dataset: SHIFTED_DATASET.into(),
            model: "DS FT".into(),
            selection: format!("best train {}", c.title()),
            scores: card.scores,
        });
    }
    run.write(Stage::Finetune, "results.csv", &render_results_csv(&rows)?)?;
    run.write(Stage::Finetune, "factors.csv", &factors)?;
    run.finish(Stage::Finetune)
}

/// Merges the stage results into one table.
pub fn cmd_report(run: &Run) -> Result<()> {
    let mut stages = vec![Stage::Baseline, Stage::Eval];
    if run.config.stages.finetune {
        stages.push(Stage::Finetune);
    }
    let mut rows = Vec::new();
    for s in stages {
        run.require(s)?;
        let p = run.path(s, "results.csv");
        rows.extend(parse_results_csv(&run.read(s, "results.csv")?, &p)?);
    }
    run.begin(Stage::Report)?;
    run.write(Stage::Report, "results.csv", &render_results_csv(&rows)?)?;
    run.write(Stage::Report, "results.txt", &render_results_table(&rows))?;
    run.finish(Stage::Report)
}

/// Every stage in order.
pub fn run_all(run: &Run, force: bool) -> Result<()> {
    cmd_generate(run, force)?;
    cmd_train(run)?;
    cmd_select(run)?;
    cmd_eval(run)?;
    cmd_baseline(run)?;
    if run.config.stages.finetune {
        cmd_finetune(run)?;
    }
    cmd_report(run)
}

/// Path of the merged results table.
pub fn results_path(root: &Path) -> PathBuf {
    root.join("report").join("results.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_stages_name_the_missing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), ExperimentConfig::smoke()).unwrap();
        for (f, want) in [
            (cmd_train as fn(&Run) -> Result<()>, "generate"),
            (cmd_select, "train"),
            (cmd_eval, "generate"),
            (cmd_report, "baseline"),
        ] {
            match f(&run) {
                Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, want),
                other => panic!("expected missing artifact, got {other:?}"),
            }
        }
    }
}
