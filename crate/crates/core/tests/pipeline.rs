use metaocc::metrics::Criterion;
use metaocc::model::DeepSetsNet;
use metaocc::numerics::Checkpoint;
use metaocc::pipeline::{cmd_eval, cmd_generate, cmd_select, cmd_train, results_path, run_all, ExperimentConfig, Run, Stage};
use metaocc::Error;

fn smoke(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..ExperimentConfig::smoke()
    }
}

#[test]
fn full_run_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), smoke(5)).unwrap();
    run_all(&run, false).unwrap();
    for s in [Stage::Generate, Stage::Train, Stage::Select, Stage::Eval, Stage::Baseline, Stage::Finetune, Stage::Report] {
        assert!(run.stage_dir(s).join("provenance.json").exists(), "{s:?}");
    }
    let csv = std::fs::read_to_string(results_path(dir.path())).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "dataset,model,selection,precision,recall,f1,f2,f05,bacc,mcc");
    let models: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    for m in ["RF", "RF Self-Lab", "Meta DS", "DS FT"] {
        assert!(models.contains(&m), "{m}");
    }
    // a second run_all over existing data needs --force
    assert!(matches!(run_all(&run, false), Err(Error::AlreadyExists(_))));
    run_all(&run, true).unwrap();
    assert_eq!(std::fs::read_to_string(results_path(dir.path())).unwrap(), csv);
}

#[test]
fn selected_checkpoint_reloads_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), smoke(6)).unwrap();
    cmd_generate(&run, false).unwrap();
    cmd_train(&run).unwrap();
    cmd_select(&run).unwrap();
    let path = run.stage_dir(Stage::Select).join(format!("meta_{}.ckpt", Criterion::F1.key()));
    let ck = Checkpoint::read(&path).unwrap();
    assert_eq!(ck.config_hash, run.config_hash());
    let net = DeepSetsNet::from_checkpoint(&ck).unwrap();
    assert_eq!(net.to_checkpoint(run.config_hash()).render(), std::fs::read_to_string(&path).unwrap());
    cmd_eval(&run).unwrap();
}

#[test]
fn stages_refuse_foreign_or_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), smoke(7)).unwrap();
    match cmd_train(&run) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "generate"),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    cmd_generate(&run, false).unwrap();
    let other = Run::new(dir.path(), smoke(8)).unwrap();
    assert!(matches!(cmd_train(&other), Err(Error::State(_))));
}
