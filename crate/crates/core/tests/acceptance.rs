//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::time::{Duration, Instant};

use metaocc::data::{make_meta_instances, make_test_split, realized_ratio, EpisodeConfig, EvalTask, Task};
use metaocc::forest::{
    baseline_predictions, best_split, gini, rf_grid_search, Baseline, ForestConfig, ForestGrid, RandomForest,
    DEFAULT_SELF_LABEL_ITERATIONS,
};
use metaocc::metrics::{aggregate, confusion, score, scorecard, ConfusionCounts, Criterion, Scores};
use metaocc::model::{DeepSetsNet, NetConfig, PairedInstance, SetBatch};
use metaocc::numerics::{Matrix, Pooling, Tape};
use metaocc::pipeline::{results_path, run_all, ExperimentConfig, Run};
use metaocc::seed::derive_seed;
use metaocc::synth::{generate_shifted_task, generate_tasks, symmetries, GeneratorConfig, ShiftDescriptor, SplitCounts};
use metaocc::train::{evaluate, evaluate_task, fine_tune, grid_search, predict_task, FineTuneConfig, TrainConfig, TrainGrid, FINE_TUNE_FACTORS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let n = rng.random_range(1..=10);
        let mut cfg = NetConfig::new(n, rng.random_range(4..=24), rng.random_range(2..=6), t);
        cfg.pooling = [Pooling::Mean, Pooling::Sum, Pooling::Max][t as usize % 3];
        let net = DeepSetsNet::build(cfg).unwrap();
        let k = rng.random_range(1..=40);
        let support = gaussian_matrix(&mut rng, k, n);
        let query: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let inst = PairedInstance::new(&support, &query, None, 0).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let a = net.forward(&inst).unwrap();
        let b = net.forward(&inst.permuted(&order)).unwrap();
        worst = worst.max((a.positive - b.positive).abs()).max((a.negative - b.negative).abs());
    }
    check(worst < 1e-9, format!("max deviation {worst:.2e} over 100 triples"))
}

// 2 -------------------------------------------------------------------------

fn batch_loss(net: &DeepSetsNet, batch: &SetBatch, w: f64) -> f64 {
    let mut tape = Tape::new();
    let z = net.logits(&mut tape, batch).unwrap();
    let l = tape.cross_entropy(z, batch.labels(), w).unwrap();
    tape.value(l).get(0, 0)
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..10u64 {
        for k in [1usize, 3, 9] {
            for n in [2usize, 10] {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (k * 100 + n) as u64));
                let mut net = DeepSetsNet::build(NetConfig::new(n, 6, 5, seed)).unwrap();
                // Zero-initialized biases put a fully dead layer's successor exactly on
                // the relu kink, where no derivative exists. Jitter every parameter so
                // the check runs at a generic point.
                let ids: Vec<_> = net.params().ids().collect();
                for &id in &ids {
                    for v in net.params_mut().value_mut(id).data_mut() {
                        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let instances: Vec<PairedInstance> = (0..4)
                    .map(|i| {
                        let support = gaussian_matrix(&mut rng, k, n);
                        let q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                        PairedInstance::new(&support, &q, Some(i % 2 == 0), 0).unwrap()
                    })
                    .collect();
                let batch = SetBatch::from_instances(&instances).unwrap();
                let w = 3.0;
                let mut tape = Tape::new();
                let z = net.logits(&mut tape, &batch).unwrap();
                let l = tape.cross_entropy(z, batch.labels(), w).unwrap();
                net.params_mut().zero_grads();
                tape.backward(l, net.params_mut()).unwrap();

                let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
                for id in ids {
                    let analytic = net.params().grad(id).data().to_vec();
                    for (i, a) in analytic.into_iter().enumerate() {
                        let orig = net.params().value(id).data()[i];
                        net.params_mut().value_mut(id).data_mut()[i] = orig + h;
                        let up = batch_loss(&net, &batch, w);
                        net.params_mut().value_mut(id).data_mut()[i] = orig - h;
                        let down = batch_loss(&net, &batch, w);
                        net.params_mut().value_mut(id).data_mut()[i] = orig;
                        let fd = (up - down) / (2.0 * h);
                        diff2 += (a - fd) * (a - fd);
                        a2 += a * a;
                        f2 += fd * fd;
                    }
                }
                let rel = diff2.sqrt() / a2.sqrt().max(f2.sqrt()).max(1e-12);
                worst = worst.max(rel);
                cases += 1;
            }
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} over {cases} cases"))
}

// 3 -------------------------------------------------------------------------

/// Independent formula evaluation, straight from the definitions.
fn oracle(tp: f64, fp: f64, fn_: f64, tn: f64) -> [f64; 7] {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fn_);
    let fb = |b: f64| div((1.0 + b * b) * p * r, b * b * p + r);
    let tnr = div(tn, tn + fp);
    let root = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    [p, r, fb(1.0), fb(2.0), fb(0.5), (r + tnr) / 2.0, div(tp * tn - fp * fn_, root)]
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..500),
            fp: rng.random_range(0..500),
            fn_: rng.random_range(1..500),
            tn: rng.random_range(0..5000),
        };
        let want = oracle(c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let got = score(&c).values();
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    let fixed = score(&ConfusionCounts {
        tp: 90,
        fp: 10,
        fn_: 10,
        tn: 890,
    });
    // (90*890 - 10*10) / sqrt(100*100*900*900) = 80000/90000
    let mcc_err = (fixed.mcc - 8.0 / 9.0).abs();
    check(
        worst < 1e-12 && mcc_err < 1e-9,
        format!("max deviation {worst:.2e}; fixed-case MCC {:.6} (error {mcc_err:.1e})", fixed.mcc),
    )
}

// 4 -------------------------------------------------------------------------

fn episodic_ratio() -> Outcome {
    let cfg = GeneratorConfig {
        positives_min: 90,
        positives_max: 110,
        ..GeneratorConfig::default()
    };
    let counts = SplitCounts {
        train: 4,
        validation: 1,
        test: 1,
    };
    let (tasks, _, _) = generate_tasks(&cfg, counts, 4).unwrap();
    let inst = make_meta_instances(&tasks, &EpisodeConfig::default(), 4).unwrap();
    let ratio = realized_ratio(&inst);
    let rel = (ratio - 50.0).abs() / 50.0;
    check(
        inst.len() >= 10_000 && rel < 0.02,
        format!("{} instances, 1:{ratio:.3} realized", inst.len()),
    )
}

// 5, 6, 7 -------------------------------------------------------------------

struct SeedResult {
    rf: Scores,
    self_label: Scores,
    meta: Scores,
    zero_shot_f1: f64,
    fine_tuned_f1: Vec<f64>,
}

fn desk_generator() -> GeneratorConfig {
    GeneratorConfig {
        positives_min: 90,
        positives_max: 110,
        ..GeneratorConfig::default()
    }
}

fn eval_tasks(tasks: &[Task], ids: &[String], seed: u64) -> Vec<EvalTask> {
    ids.iter()
        .enumerate()
        .map(|(j, id)| {
            let task = tasks.iter().find(|t| &t.id == id).unwrap().clone();
            let split = make_test_split(&task, 0.1, derive_seed(seed, j as u64)).unwrap();
            EvalTask { task, split }
        })
        .collect()
}

fn forest_scores(cfg: &ForestConfig, kind: Baseline, tasks: &[EvalTask], seed: u64) -> Scores {
    let cards: Vec<_> = tasks
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let pred = baseline_predictions(cfg, kind, t, derive_seed(seed, j as u64)).unwrap();
            scorecard(t.task.id.clone(), &pred, &t.labels_of(&t.split.final_test)).unwrap()
        })
        .collect();
    aggregate(&cards).unwrap()
}

fn desk_experiment(seed: u64) -> SeedResult {
    let gen = desk_generator();
    let counts = SplitCounts {
        train: 20,
        validation: 4,
        test: 6,
    };
    let (raw, _, split) = generate_tasks(&gen, counts, seed).unwrap();
    let tasks: Vec<Task> = raw.iter().map(|t| t.normalize().unwrap()).collect();
    let train: Vec<Task> = split
        .train
        .iter()
        .map(|id| tasks.iter().find(|t| &t.id == id).unwrap().clone())
        .collect();
    let val = eval_tasks(&tasks, &split.validation, derive_seed(seed, 1));
    let test = eval_tasks(&tasks, &split.test, derive_seed(seed, 2));

    // forest hyperparameters shared across test tasks, chosen on validation
    let grid = ForestGrid {
        n_trees: vec![100, 200],
        ..ForestGrid::default()
    };
    let (combos, report) = rf_grid_search(&grid, &val, Baseline::Plain, derive_seed(seed, 3)).unwrap();
    let rf_cfg = combos[report.best(Criterion::F1)].clone();
    let rf = forest_scores(&rf_cfg, Baseline::Plain, &test, derive_seed(seed, 4));
    let self_label = forest_scores(
        &rf_cfg,
        Baseline::SelfLabel {
            max_iterations: DEFAULT_SELF_LABEL_ITERATIONS,
        },
        &test,
        derive_seed(seed, 4),
    );

    let base = TrainConfig {
        epochs: 10,
        batch_size: 64,
        episodes: EpisodeConfig {
            min_support: 5,
            max_support: 30,
            max_positive_queries: Some(30),
            augment: Some(symmetries(&gen)),
            ..EpisodeConfig::default()
        },
        seed: derive_seed(seed, 5),
        ..TrainConfig::default()
    };
    let ds_grid = TrainGrid {
        learning_rate: vec![1e-3],
        l1: vec![1e-6],
        positive_weight: vec![1.0, 10.0],
    };
    let net_cfg = NetConfig::new(gen.feature_dim, 32, 5, derive_seed(seed, 6));
    let out = grid_search(&net_cfg, &ds_grid, &base, &train, &val, &|_, _, _| Ok(())).unwrap();
    let (chosen_cfg, net) = out.selected(Criterion::F1);
    let meta = evaluate(net, &test).unwrap();

    let shift = ShiftDescriptor {
        support_size: 50,
        train_negative_ratio: 100.0,
        pool_positives: 50,
        test_positives: 100,
        ..ShiftDescriptor::default()
    };
    let st = generate_shifted_task(&gen, &shift, "shifted", derive_seed(seed, 7)).unwrap();
    let shifted = EvalTask {
        task: st.task.normalize().unwrap(),
        split: st.split,
    };
    let zero_shot_f1 = evaluate_task(net, &shifted).unwrap().scores.f1;
    let fine_tuned_f1 = FINE_TUNE_FACTORS
        .iter()
        .map(|&f| {
            let ftc = FineTuneConfig {
                seed: derive_seed(seed, 8),
                ..FineTuneConfig::from_train(chosen_cfg, f)
            };
            let o = fine_tune(net, &shifted, &ftc, Criterion::F1).unwrap();
            evaluate_task(&o.net, &shifted).unwrap().scores.f1
        })
        .collect();
    SeedResult {
        rf,
        self_label,
        meta,
        zero_shot_f1,
        fine_tuned_f1,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// 8 -------------------------------------------------------------------------

fn smoke_determinism() -> Outcome {
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = ExperimentConfig {
                seed: 11,
                ..ExperimentConfig::smoke()
            };
            let run = Run::new(dir.path(), cfg).unwrap();
            run_all(&run, false).unwrap();
            std::fs::read(results_path(dir.path())).unwrap()
        })
        .collect();
    let rows = String::from_utf8_lossy(&runs[0]).lines().count() - 1;
    check(
        runs[0] == runs[1] && rows > 0,
        format!("{} bytes, {rows} rows, identical: {}", runs[0].len(), runs[0] == runs[1]),
    )
}

// 9 -------------------------------------------------------------------------

fn zero_shot_purity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = DeepSetsNet::build(NetConfig::new(4, 16, 5, 9)).unwrap();
    let before_ck = net.to_checkpoint("x").render();
    let before = net.param_hash();
    let support = gaussian_matrix(&mut rng, 12, 4);
    let queries = gaussian_matrix(&mut rng, 300, 4);
    let preds = predict_task(&net, &support, &queries).unwrap();
    let same = net.param_hash() == before && net.to_checkpoint("x").render() == before_ck;
    check(same && preds.len() == 300, format!("hash {} unchanged: {same}", &before[..12]))
}

// 10 ------------------------------------------------------------------------

fn forest_correctness() -> Outcome {
    let x = Matrix::from_rows(&[[1.0, 5.0], [2.0, 1.0], [3.0, 4.0], [4.0, 2.0]]).unwrap();
    let y = [true, false, true, false];
    let got = best_split(&x, &y, &[0, 1, 2, 3], &[0, 1], 1).unwrap();
    // exhaustive oracle over every feature and midpoint
    let mut best = (usize::MAX, f64::NAN, f64::INFINITY);
    for f in 0..2 {
        let mut vals: Vec<f64> = (0..4).map(|r| x.get(r, f)).collect();
        vals.sort_by(f64::total_cmp);
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let side = |left: bool| {
                let rows: Vec<usize> = (0..4).filter(|&r| (x.get(r, f) <= t) == left).collect();
                let pos = rows.iter().filter(|&&r| y[r]).count();
                (rows.len(), gini(rows.len() - pos, pos))
            };
            let ((nl, gl), (nr, gr)) = (side(true), side(false));
            let imp = (nl as f64 * gl + nr as f64 * gr) / 4.0;
            if imp < best.2 {
                best = (f, t, imp);
            }
        }
    }
    let split_ok = got.feature == best.0 && got.threshold == best.1 && (got.impurity - best.2).abs() < 1e-15;

    let blobs = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(0, 2);
        let mut labels = Vec::new();
        for i in 0..400 {
            let pos = i % 2 == 0;
            let cx = if pos { 2.0 } else { -2.0 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            m.push_row(&[cx + 0.5 * a, 0.5 * b]).unwrap();
            labels.push(pos);
        }
        (m, labels)
    };
    let (xtr, ytr) = blobs(1);
    let (xte, yte) = blobs(2);
    let forest = RandomForest::fit(&ForestConfig::default(), &xtr, &ytr, 0).unwrap();
    let c = confusion(&forest.predict(&xte), &yte).unwrap();
    let f1 = score(&c).f1;
    check(
        split_ok && f1 > 0.95,
        format!(
            "split (feature {}, threshold {}, impurity {}) vs oracle ({}, {}, {}); blob F1 {f1:.4}",
            got.feature, got.threshold, got.impurity, best.0, best.1, best.2
        ),
    )
}

fn desk_summary(results: &[SeedResult], id: usize) -> Outcome {
    match id {
        5 => {
            let rf = mean(results.iter().map(|s| s.rf.f1));
            let ds = mean(results.iter().map(|s| s.meta.f1));
            let per: Vec<String> = results.iter().map(|s| format!("{:.3}/{:.3}", s.meta.f1, s.rf.f1)).collect();
            check(ds > rf, format!("meta DS F1 {ds:.3} vs RF {rf:.3} (per seed DS/RF {})", per.join(" ")))
        }
        6 => {
            let rf = mean(results.iter().map(|s| s.rf.recall));
            let sl = mean(results.iter().map(|s| s.self_label.recall));
            check(sl >= rf, format!("self-label recall {sl:.3} vs RF {rf:.3}"))
        }
        _ => {
            let ok = results
                .iter()
                .all(|s| s.fine_tuned_f1.iter().cloned().fold(f64::MIN, f64::max) > s.zero_shot_f1);
            let per: Vec<String> = results
                .iter()
                .map(|s| {
                    let f: Vec<String> = s.fine_tuned_f1.iter().map(|v| format!("{v:.3}")).collect();
                    format!("{:.3} -> [{}]", s.zero_shot_f1, f.join(" "))
                })
                .collect();
            check(ok, format!("zero-shot -> fine-tuned F1 per factor: {}", per.join("; ")))
        }
    }
}

fn main() {
    // ACCEPTANCE_ONLY=2,9 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failures = 0;
    let mut report = |id: usize, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = o.pass && in_time;
        if !pass {
            failures += 1;
        }
        let budget_note = match budget {
            Some(b) if !in_time => format!(", over the {}s budget", b.as_secs()),
            _ => String::new(),
        };
        println!(
            "criterion {id:>2} {name:<28} {}  {} [{:.1}s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    };

    report(1, "permutation invariance", Some(Duration::from_secs(10)), &mut permutation_invariance);
    report(2, "gradient correctness", Some(Duration::from_secs(60)), &mut gradient_check);
    report(3, "metric oracle", None, &mut metric_oracle);
    report(4, "episodic ratio", None, &mut episodic_ratio);

    // One 3-seed experiment feeds criteria 5 to 7; its cost is charged to 5.
    let mut desk: Option<Vec<SeedResult>> = None;
    let run_desk = |desk: &mut Option<Vec<SeedResult>>| {
        desk.get_or_insert_with(|| (0..3).map(desk_experiment).collect()).len()
    };
    report(5, "ordering: meta DS > RF", Some(Duration::from_secs(30 * 60)), &mut || {
        run_desk(&mut desk);
        desk_summary(desk.as_ref().unwrap(), 5)
    });
    report(6, "ordering: self-label recall", None, &mut || {
        run_desk(&mut desk);
        desk_summary(desk.as_ref().unwrap(), 6)
    });
    report(7, "ordering: fine-tune", None, &mut || {
        run_desk(&mut desk);
        desk_summary(desk.as_ref().unwrap(), 7)
    });

    report(8, "determinism (smoke)", Some(Duration::from_secs(120)), &mut smoke_determinism);
    report(9, "zero-shot purity", None, &mut zero_shot_purity);
    report(10, "RF correctness", None, &mut forest_correctness);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all selected acceptance criteria passed");
}
