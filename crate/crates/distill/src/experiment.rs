//! Experiment orchestration: dataset materialization, teacher pretraining,
//! single runs, and the multi-strategy × multi-seed ablation driver.
//!
//! Every command is deterministic under a fixed config and seed; run outputs
//! (metrics, checkpoints, config snapshot) are byte-stable across reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{config_digest, ExperimentConfig};
use crate::data::{dataset_to_csv, gen_dataset, Dataset};
use crate::distillers::{HintProjections, Strategy};
use crate::error::{DistillError, Result};
use crate::metrics;
use crate::network::{build_network, AdaptionSet, Network};
use crate::policy::PolicyParams;
use crate::routing::RoutingNetwork;
use crate::trainer::{
    accuracy_of, derive_seed, lr_at, train, EpochStats, Sgd, TeacherMode, TrainOutput,
};
use tapegrad::Tape;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STUDENT_CHECKPOINT_FILE: &str = "student.ckpt";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// Final record of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub teacher_train_accuracy: f64,
    pub teacher_test_accuracy: f64,
    pub wall_time_secs: f64,
}

/// Writes the generated dataset as CSV into `out/dataset.csv`.
pub fn gen_data_cmd(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    config.validate()?;
    let ds = gen_dataset(&config.dataset, config.dataset.seed)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("dataset.csv");
    std::fs::write(&path, dataset_to_csv(&ds))?;
    Ok(path)
}

/// Trains the teacher spec with plain cross-entropy and writes a checkpoint.
pub fn pretrain_teacher(config: &ExperimentConfig, out: &Path) -> Result<(PathBuf, RunSummary)> {
    let mut cfg = config.clone();
    cfg.fill_defaults()?;
    cfg.validate()?;
    let started = Instant::now();

    let data = gen_dataset(&cfg.dataset, cfg.dataset.seed)?;
    let spec = cfg.teacher_spec();
    let seed = cfg.train.seed;
    let mut teacher = build_network(&spec, derive_seed(seed, "teacher-init"))?;
    let epochs = cfg.train.pretrain_epochs.unwrap_or(cfg.train.epochs);

    train_plain(&mut teacher, &data, &cfg, epochs, derive_seed(seed, "teacher-pretrain"))?;

    let train_acc = accuracy_of(&teacher, &data.x_train, &data.y_train)?;
    let test_acc = accuracy_of(&teacher, &data.x_test, &data.y_test)?;

    std::fs::create_dir_all(out)?;
    let snapshot = snapshot_toml(&cfg)?;
    let meta = CheckpointMeta {
        seed,
        epoch: epochs,
        config_digest: config_digest(&snapshot),
        train_accuracy: train_acc,
        test_accuracy: test_acc,
    };
    let path = out.join("teacher.ckpt");
    save_checkpoint(&teacher, &meta, &path)?;

    let summary = RunSummary {
        strategy: "pretrain".into(),
        seed,
        epochs,
        final_train_accuracy: train_acc,
        final_test_accuracy: test_acc,
        teacher_train_accuracy: train_acc,
        teacher_test_accuracy: test_acc,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((path, summary))
}

/// Plain cross-entropy SGD training of a single network.
fn train_plain(
    net: &mut Network,
    data: &Dataset,
    cfg: &ExperimentConfig,
    epochs: usize,
    seed: u64,
) -> Result<()> {
    use rand::seq::SliceRandom;
    let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let mut sgd = Sgd::new(cfg.optim.clone(), &net.params);
    let n = data.train_len();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.train.batch_size) {
            let x = crate::data::gather_rows(&data.x_train, batch_idx);
            let targets: Vec<usize> = batch_idx.iter().map(|&i| data.y_train[i]).collect();
            let tape = Tape::new();
            let bound = net.bind(&tape);
            let bundle = net.forward_features(&tape, &bound, &x)?;
            let loss = tape.cross_entropy(&bundle.logits, &targets)?;
            if !loss.item().is_finite() {
                return Err(DistillError::Numeric(format!(
                    "non-finite pretraining loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(&loss)?;
            sgd.step(epoch, &mut net.params, &bound, &grads);
        }
        let _ = lr_at(&cfg.optim, epoch);
    }
    Ok(())
}

fn snapshot_toml(cfg: &ExperimentConfig) -> Result<String> {
    cfg.to_toml()
}

/// Builds the routing network for a run according to the teacher mode.
pub fn assemble_run(
    cfg: &ExperimentConfig,
) -> Result<(RoutingNetwork, HintProjections, Dataset, CheckpointMeta)> {
    let data = gen_dataset(&cfg.dataset, cfg.dataset.seed)?;
    let seed = cfg.train.seed;
    let teacher_spec = cfg.teacher_spec();
    let student_spec = cfg.student_spec();

    let (teacher, teacher_meta) = match cfg.train.teacher_mode {
        TeacherMode::Scratch => (
            build_network(&teacher_spec, derive_seed(seed, "teacher-scratch"))?,
            CheckpointMeta::default(),
        ),
        mode => {
            let path = cfg.train.teacher_checkpoint.as_ref().ok_or_else(|| {
                DistillError::Config(
                    "no teacher checkpoint configured; run `distill pretrain-teacher --config <config> --out <dir>` \
                     and set train.teacher_checkpoint to the written file"
                        .into(),
                )
            })?;
            let (mut net, meta) = load_checkpoint(Path::new(path))?;
            if net.spec != teacher_spec {
                return Err(DistillError::Integrity(format!(
                    "teacher checkpoint spec {:?} does not match configured spec {:?}",
                    net.spec, teacher_spec
                )));
            }
            if mode == TeacherMode::Frozen {
                net.freeze();
            }
            (net, meta)
        }
    };

    let student = build_network(&student_spec, derive_seed(seed, "student-init"))?;
    let adaptions = AdaptionSet::build(&teacher_spec, &student_spec, derive_seed(seed, "adaptions"))?;
    let policy = PolicyParams::build(&teacher_spec, &student_spec, derive_seed(seed, "policy"));
    let hints = HintProjections::build(
        &cfg.distill_config(),
        &teacher_spec,
        &student_spec,
        derive_seed(seed, "hints"),
    )?;
    let rn = RoutingNetwork::new(teacher, student, adaptions, policy)?;
    Ok((rn, hints, data, teacher_meta))
}

/// Output of [`run_experiment`], with everything already on disk.
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub stats: Vec<EpochStats>,
    pub summary: RunSummary,
}

/// Executes one full training run and writes the four run artifacts
/// (metrics, student checkpoint, config snapshot, summary) into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let output = run_experiment_with(config, out, false)?;
    Ok(output.0)
}

/// Like [`run_experiment`] but optionally enabling the per-step audit, and
/// returning the raw training output for callers that inspect step logs.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    out: &Path,
    audit: bool,
) -> Result<(RunArtifacts, TrainOutput)> {
    let mut cfg = config.clone();
    cfg.fill_defaults()?;
    // Snapshots must reproduce the run from any working directory.
    if let Some(p) = &cfg.train.teacher_checkpoint {
        let abs = std::fs::canonicalize(p)
            .map_err(|e| DistillError::Config(format!("teacher checkpoint {p}: {e}")))?;
        cfg.train.teacher_checkpoint = Some(abs.to_string_lossy().into_owned());
    }
    cfg.train.output_dir = Some(out.to_string_lossy().into_owned());
    cfg.validate()?;

    let started = Instant::now();
    let (mut rn, mut hints, data, teacher_meta) = assemble_run(&cfg)?;

    let mut settings = cfg.train_settings()?;
    settings.audit = audit;
    settings.collect_steps = audit;

    let dcfg = cfg.distill_config();
    let output = train(&mut rn, &mut hints, &data, &dcfg, &settings)?;

    let train_acc = accuracy_of(&rn.student, &data.x_train, &data.y_train)?;
    let test_acc = accuracy_of(&rn.student, &data.x_test, &data.y_test)?;

    std::fs::create_dir_all(out)?;
    let snapshot = snapshot_toml(&cfg)?;
    std::fs::write(out.join(CONFIG_SNAPSHOT_FILE), &snapshot)?;

    let spots = rn.spot_count();
    std::fs::write(out.join(METRICS_FILE), metrics::render(&output.stats, spots))?;

    let meta = CheckpointMeta {
        seed: cfg.train.seed,
        epoch: cfg.train.epochs,
        config_digest: config_digest(&snapshot),
        train_accuracy: train_acc,
        test_accuracy: test_acc,
    };
    save_checkpoint(&rn.student, &meta, &out.join(STUDENT_CHECKPOINT_FILE))?;

    let summary = RunSummary {
        strategy: cfg.train.strategy.name().into(),
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        final_train_accuracy: train_acc,
        final_test_accuracy: test_acc,
        teacher_train_accuracy: teacher_meta.train_accuracy,
        teacher_test_accuracy: teacher_meta.test_accuracy,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| DistillError::Config(format!("cannot serialize summary: {e}")))?;
    std::fs::write(out.join(SUMMARY_FILE), summary_json)?;

    let stats = output.stats.clone();
    Ok((
        RunArtifacts {
            out_dir: out.to_path_buf(),
            stats,
            summary,
        },
        output,
    ))
}

/// One ablation cell: a (strategy, seed) run outcome.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub strategy: String,
    pub seed: u64,
    pub final_test_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Canonical presentation order for strategies.
pub fn strategy_order(strategies: &[Strategy]) -> Vec<Strategy> {
    Strategy::ALL
        .iter()
        .copied()
        .filter(|s| strategies.contains(s))
        .collect()
}

/// Runs the strategy × seed cross product, each run in its own subdirectory,
/// and aggregates mean ± std of final test accuracy per strategy. Child runs
/// execute on worker threads; a failing cell is recorded without aborting the
/// table.
pub fn ablate(
    config: &ExperimentConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationTable> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(DistillError::Config(
            "ablate needs at least one strategy and one seed".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    let ordered = strategy_order(strategies);

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &strategy in &ordered {
            for &seed in seeds {
                let mut cfg = config.clone();
                let out_dir = out.join(format!("{}_s{}", strategy.name(), seed));
                handles.push((
                    strategy,
                    seed,
                    scope.spawn(move || {
                        cfg.train.strategy = strategy;
                        cfg.train.seed = seed;
                        run_experiment(&cfg, &out_dir)
                            .map(|a| a.summary.final_test_accuracy)
                            .map_err(|e| e.to_string())
                    }),
                ));
            }
        }

        let mut cells: Vec<AblationCell> = Vec::new();
        for (strategy, seed, handle) in handles {
            let outcome = handle.join().unwrap_or_else(|_| Err("worker panicked".into()));
            let (acc, err) = match outcome {
                Ok(a) => (Some(a), None),
                Err(e) => (None, Some(e)),
            };
            cells.push(AblationCell {
                strategy: strategy.name().into(),
                seed,
                final_test_accuracy: acc,
                error: err,
            });
        }

        let rows = ordered
            .iter()
            .map(|s| {
                let mine: Vec<AblationCell> = cells
                    .iter()
                    .filter(|c| c.strategy == s.name())
                    .cloned()
                    .collect();
                let accs: Vec<f64> = mine.iter().filter_map(|c| c.final_test_accuracy).collect();
                let (mean, std) = if accs.is_empty() {
                    (None, None)
                } else {
                    let m = accs.iter().sum::<f64>() / accs.len() as f64;
                    let var = accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / accs.len() as f64;
                    (Some(m), Some(var.sqrt()))
                };
                AblationRow {
                    strategy: s.name().into(),
                    mean,
                    std,
                    cells: mine,
                }
            })
            .collect();
        Ok::<_, DistillError>(AblationTable { rows })
    })
    .and_then(|table| {
        let json = serde_json::to_string_pretty(&table)
            .map_err(|e| DistillError::Config(format!("cannot serialize ablation table: {e}")))?;
        std::fs::write(out.join("ablation.json"), json)?;
        std::fs::write(out.join("ablation.txt"), render_ablation_text(&table))?;
        Ok(table)
    })
}

/// Human-readable rendering of the ablation table.
pub fn render_ablation_text(table: &AblationTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>10} {:>10}  per-seed", "strategy", "mean", "std");
    for row in &table.rows {
        let mean = row.mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
        let std = row.std.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
        let cells: Vec<String> = row
            .cells
            .iter()
            .map(|c| match (&c.final_test_accuracy, &c.error) {
                (Some(a), _) => format!("s{}={:.4}", c.seed, a),
                (None, Some(e)) => format!("s{}=error({e})", c.seed),
                _ => format!("s{}=?", c.seed),
            })
            .collect();
        let _ = writeln!(out, "{:<10} {mean:>10} {std:>10}  {}", row.strategy, cells.join(" "));
    }
    out
}

/// Loads a checkpoint, re-evaluates it on the configured dataset and checks
/// the stored accuracies.
pub fn eval_cmd(config: &ExperimentConfig, checkpoint: &Path) -> Result<RunSummary> {
    let mut cfg = config.clone();
    cfg.fill_defaults()?;
    let data = gen_dataset(&cfg.dataset, cfg.dataset.seed)?;
    let (net, meta) = load_checkpoint(checkpoint)?;
    let train_acc = accuracy_of(&net, &data.x_train, &data.y_train)?;
    let test_acc = accuracy_of(&net, &data.x_test, &data.y_test)?;
    Ok(RunSummary {
        strategy: "eval".into(),
        seed: meta.seed,
        epochs: meta.epoch,
        final_train_accuracy: train_acc,
        final_test_accuracy: test_acc,
        teacher_train_accuracy: meta.train_accuracy,
        teacher_test_accuracy: meta.test_accuracy,
        wall_time_secs: 0.0,
    })
}
