//! File-based experiment pipeline. Every stage reads the outputs of earlier
//! stages from a run directory and writes its own subdirectory, stamped with
//! the hash of the experiment configuration.
//!
//! ```text
//! <run>/config.json
//! <run>/data/      tasks/*.csv splits.csv recipes.json generator.json
//!                  task_splits/*.csv shifted/{task.csv,split.csv,recipe.json}
//! <run>/train/     runs/NN/{log.csv,latest.ckpt,best_<criterion>.ckpt} report.csv report.txt
//! <run>/select/    meta_<criterion>.ckpt selection.csv selection.txt
//! <run>/eval/      results.csv per_task.csv
//! <run>/baseline/  rf_grid.csv self_label_grid.csv results.csv per_task.csv
//! <run>/finetune/  results.csv factors.csv
//! <run>/report/    results.csv results.txt
//! ```

mod config;
mod stages;

pub use config::{ExperimentConfig, FineTuneSettings, NetSettings, StageToggles, TrainSettings};
pub use stages::{
    cmd_baseline, cmd_eval, cmd_finetune, cmd_generate, cmd_report, cmd_select, cmd_train, results_path,
    run_all,
    Run, Stage,
};
