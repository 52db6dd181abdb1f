//! CLI front door: dataset generation, teacher pretraining, training runs,
//! multi-strategy ablations, gradient checking and checkpoint evaluation.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric failure, 3 gradcheck or
//! acceptance failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distill::config::{load_config, preset, ExperimentConfig};
use distill::distillers::Strategy;
use distill::error::DistillError;
use distill::experiment;
use distill::gradcheck::{self, Scope};

#[derive(Parser)]
#[command(
    name = "distill",
    about = "Routed knowledge distillation on synthetic benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a TOML experiment config.
    #[arg(long, value_name = "path")]
    config: Option<PathBuf>,
    /// Built-in config preset (desk | paper); alternative to --config.
    #[arg(long, value_name = "name")]
    preset: Option<String>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.strategy (adaptive | always | anti | rand | none).
    #[arg(long, value_name = "name")]
    strategy: Option<String>,
    /// Override train.teacher_checkpoint.
    #[arg(long, value_name = "path")]
    teacher_checkpoint: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, DistillError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => load_config(path)?,
            (None, Some(name)) => preset(name)?,
            (Some(_), Some(_)) => {
                return Err(DistillError::Config(
                    "--config and --preset are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(DistillError::Config(
                    "one of --config or --preset is required".into(),
                ))
            }
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(strategy) = &self.strategy {
            cfg.train.strategy = Strategy::parse(strategy)?;
        }
        if let Some(path) = &self.teacher_checkpoint {
            cfg.train.teacher_checkpoint = Some(path.to_string_lossy().into_owned());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it as CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, value_name = "dir")]
        out: PathBuf,
    },
    /// Train the teacher with plain cross-entropy and write its checkpoint.
    PretrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "dir")]
        out: PathBuf,
    },
    /// Run one distillation experiment.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "dir")]
        out: PathBuf,
    },
    /// Run every (strategy, seed) combination and aggregate a table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "dir")]
        out: PathBuf,
        /// Comma-separated strategies (default: all five).
        #[arg(long, value_delimiter = ',', value_name = "names")]
        strategies: Vec<String>,
        /// Comma-separated seeds (default: 1,2,3).
        #[arg(long, value_delimiter = ',', value_name = "seeds")]
        seeds: Vec<u64>,
    },
    /// Finite-difference verification of analytic gradients.
    Gradcheck {
        /// ops | network | policy | end-to-end | all
        #[arg(long, default_value = "all", value_name = "scope")]
        scope: String,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "path")]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), DistillError> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let path = experiment::gen_data_cmd(&cfg, &out)?;
            println!("dataset written to {}", path.display());
        }
        Command::PretrainTeacher { config, out } => {
            let cfg = config.load()?;
            let (path, summary) = experiment::pretrain_teacher(&cfg, &out)?;
            println!(
                "teacher checkpoint {} (train acc {:.4}, test acc {:.4}, {:.1}s)",
                path.display(),
                summary.final_train_accuracy,
                summary.final_test_accuracy,
                summary.wall_time_secs
            );
        }
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let artifacts = experiment::run_experiment(&cfg, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&artifacts.summary)
                    .map_err(|e| DistillError::Config(e.to_string()))?
            );
        }
        Command::Ablate {
            config,
            out,
            strategies,
            seeds,
        } => {
            let cfg = config.load()?;
            let strategies = if strategies.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                strategies
                    .iter()
                    .map(|s| Strategy::parse(s))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
            let table = experiment::ablate(&cfg, &strategies, &seeds, &out)?;
            print!("{}", experiment::render_ablation_text(&table));
        }
        Command::Gradcheck { scope } => {
            let scopes = if scope == "all" {
                vec![Scope::Ops, Scope::Network, Scope::Policy, Scope::EndToEnd]
            } else {
                vec![Scope::parse(&scope)?]
            };
            let reports = gradcheck::run_scopes(&scopes)?;
            let mut failed = Vec::new();
            for r in &reports {
                println!(
                    "gradcheck {:<11} max rel error {:.3e} over {} checks{}",
                    r.scope,
                    r.max_rel_error,
                    r.checks,
                    if r.passed() { String::new() } else { format!("  FAIL at {}", r.worst) }
                );
                if !r.passed() {
                    failed.push(format!("{} ({})", r.scope, r.worst));
                }
            }
            if !failed.is_empty() {
                return Err(DistillError::GradCheck(format!(
                    "tolerance {} exceeded in: {}",
                    gradcheck::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = config.load()?;
            let summary = experiment::eval_cmd(&cfg, &checkpoint)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary)
                    .map_err(|e| DistillError::Config(e.to_string()))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
