use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaocc::pipeline::{self, ExperimentConfig, Run};
use metaocc::synth::SplitCounts;
use metaocc::{Error, Result};

/// Meta-learned one-class classification: data generation, meta-training,
/// model selection, evaluation, fine-tuning and baselines.
#[derive(Parser, Debug)]
#[command(name = "metaocc", version)]
struct Cli {
    /// Experiment config (.toml or .json). Defaults to the run directory's
    /// config.json, then to the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overwrite existing generated data.
    #[arg(long, global = true)]
    force: bool,
    /// Desk-scale preset: 5/2/2 tasks, tiny network, 5 epochs.
    #[arg(long, global = true)]
    smoke: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark and evaluation splits.
    Generate {
        /// Train/validation/test task counts, e.g. 46/7/8.
        #[arg(long)]
        tasks: Option<SplitCounts>,
    },
    /// Meta-train every configuration of the training grid.
    Train,
    /// Choose the best configuration per criterion on meta-validation.
    Select,
    /// Zero-shot evaluation of the selected models on the test tasks.
    Eval,
    /// Fine-tune the selected models on the shifted task.
    Finetune,
    /// Random Forest and self-labeling baselines.
    Baseline,
    /// Merge stage results into one table.
    Report,
    /// Every stage in order.
    Run {
        #[arg(long)]
        tasks: Option<SplitCounts>,
    },
    /// Print the resolved configuration as JSON.
    Config,
}

fn resolve_config(cli: &Cli, tasks: Option<SplitCounts>) -> Result<ExperimentConfig> {
    let stored = cli.out.join("config.json");
    let mut cfg = if let Some(p) = &cli.config {
        ExperimentConfig::read(p)?
    } else if cli.smoke {
        ExperimentConfig::smoke()
    } else if stored.exists() {
        ExperimentConfig::read(&stored)?
    } else {
        ExperimentConfig::default()
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = tasks {
        cfg.tasks = t;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let tasks = match &cli.command {
        Command::Generate { tasks } | Command::Run { tasks } => *tasks,
        _ => None,
    };
    let cfg = resolve_config(cli, tasks)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_json()?);
        return Ok(());
    }
    let run = Run::new(&cli.out, cfg)?;
    log::info!("config hash {}", run.config_hash());
    match cli.command {
        Command::Generate { .. } => pipeline::cmd_generate(&run, cli.force),
        Command::Train => pipeline::cmd_train(&run),
        Command::Select => pipeline::cmd_select(&run),
        Command::Eval => pipeline::cmd_eval(&run),
        Command::Finetune => pipeline::cmd_finetune(&run),
        Command::Baseline => pipeline::cmd_baseline(&run),
        Command::Report => {
            pipeline::cmd_report(&run)?;
            print_table(&cli.out)
        }
        Command::Run { .. } => {
            pipeline::run_all(&run, cli.force)?;
            print_table(&cli.out)
        }
        Command::Config => unreachable!(),
    }
}

fn print_table(out: &Path) -> Result<()> {
    let p = out.join("report").join("results.txt");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
