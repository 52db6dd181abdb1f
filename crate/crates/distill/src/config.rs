//! Experiment configuration: a strict TOML schema (unknown keys are hard
//! errors), two built-in presets, and resolution into the concrete run
//! parameters. The resolved form serializes back to a snapshot that fully
//! reproduces the run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::data::DatasetSpec;
use crate::distillers::{DistillConfig, DistillerKind, SpotSet, Strategy};
use crate::error::{DistillError, Result};
use crate::network::{BlockSpec, NetworkSpec};
use crate::policy::TauSchedule;
use crate::trainer::{SgdConfig, TeacherMode, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub kind: DistillerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_spots: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub logit_spot: bool,
    #[serde(default = "default_one")]
    pub beta1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default = "default_one")]
    pub beta3: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_at_power")]
    pub at_power: f64,
    #[serde(default = "default_true")]
    pub kl_t2_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    /// Per-epoch multiplicative decay; when absent, chosen so τ reaches
    /// `tau_min` at the final epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_decay: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            tau0: default_tau0(),
            tau_min: default_tau_min(),
            tau_decay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch budget for `pretrain-teacher`; defaults to `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_epochs: Option<usize>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_teacher_mode")]
    pub teacher_mode: TeacherMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    4.0
}
fn default_at_power() -> f64 {
    2.0
}
fn default_tau0() -> f64 {
    5.0
}
fn default_tau_min() -> f64 {
    0.5
}
fn default_strategy() -> Strategy {
    Strategy::Adaptive
}
fn default_seed() -> u64 {
    1
}
fn default_teacher_mode() -> TeacherMode {
    TeacherMode::Frozen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub distill: DistillSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub optim: SgdConfig,
    pub train: TrainSection,
}

impl ExperimentConfig {
    /// Fills every optional field with its concrete default, in place.
    /// A filled config serializes to a self-contained snapshot.
    pub fn fill_defaults(&mut self) -> Result<()> {
        let n = self.teacher.blocks.len();
        if self.distill.intermediate_spots.is_none() {
            self.distill.intermediate_spots =
                Some(SpotSet::defaults(self.distill.kind, n).intermediate);
        }
        if self.distill.beta2.is_none() {
            self.distill.beta2 = Some(self.distill.kind.default_beta2());
        }
        if self.policy.tau_decay.is_none() {
            let sched =
                TauSchedule::for_run(self.policy.tau0, self.policy.tau_min, self.train.epochs)?;
            self.policy.tau_decay = Some(sched.decay);
        }
        if self.train.pretrain_epochs.is_none() {
            self.train.pretrain_epochs = Some(self.train.epochs);
        }
        Ok(())
    }

    pub fn teacher_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.dataset.input_dim,
            blocks: self.teacher.blocks.clone(),
            classifier_dim: self.dataset.classes,
        }
    }

    pub fn student_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.dataset.input_dim,
            blocks: self.student.blocks.clone(),
            classifier_dim: self.dataset.classes,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            kind: self.distill.kind,
            spots: SpotSet {
                intermediate: self
                    .distill
                    .intermediate_spots
                    .clone()
                    .unwrap_or_else(|| {
                        SpotSet::defaults(self.distill.kind, self.teacher.blocks.len()).intermediate
                    }),
                logit_spot: self.distill.logit_spot,
            },
            beta1: self.distill.beta1,
            beta2: self
                .distill
                .beta2
                .unwrap_or_else(|| self.distill.kind.default_beta2()),
            beta3: self.distill.beta3,
            temperature: self.distill.temperature,
            at_power: self.distill.at_power,
            kl_t2_scaling: self.distill.kl_t2_scaling,
        }
    }

    pub fn tau_schedule(&self) -> Result<TauSchedule> {
        match self.policy.tau_decay {
            Some(decay) => {
                let s = TauSchedule {
                    tau0: self.policy.tau0,
                    tau_min: self.policy.tau_min,
                    decay,
                };
                s.validate()?;
                Ok(s)
            }
            None => TauSchedule::for_run(self.policy.tau0, self.policy.tau_min, self.train.epochs),
        }
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            strategy: self.train.strategy,
            seed: self.train.seed,
            teacher_mode: self.train.teacher_mode,
            optim: self.optim.clone(),
            tau: self.tau_schedule()?,
            audit: false,
            collect_steps: false,
        })
    }

    /// Full cross-field validation; lists every violation it finds.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.dataset.validate() {
            problems.push(e.to_string());
        }
        for (name, spec) in [("teacher", self.teacher_spec()), ("student", self.student_spec())] {
            if let Err(e) = spec.validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if self.teacher.blocks.len() != self.student.blocks.len() {
            problems.push(format!(
                "teacher has {} blocks but student has {}",
                self.teacher.blocks.len(),
                self.student.blocks.len()
            ));
        }
        if let Err(e) = self.distill_config().validate(self.teacher.blocks.len()) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.optim.validate() {
            problems.push(e.to_string());
        }
        if self.train.batch_size == 0 {
            problems.push("train.batch_size must be positive".into());
        }
        if let Err(e) = self.tau_schedule() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DistillError::Config(problems.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| DistillError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Strict parse: unknown keys anywhere are a hard error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| DistillError::Config(format!("config parse error: {e}")))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DistillError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// SHA-256 hex digest of a config document.
pub fn config_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The desk-scale benchmark: 10-class blobs in 32 dimensions, a 4×128 teacher
/// distilling into a 4×16 student with feature hints plus softened KL.
pub fn desk_preset() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            kind: crate::data::DatasetKind::Blobs,
            classes: 10,
            input_dim: 32,
            samples_per_class: 500,
            noise: 3.0,
            seed: 7,
            path: None,
        },
        teacher: ModelSection {
            blocks: vec![BlockSpec::relu_stack(&[128]); 4],
        },
        student: ModelSection {
            blocks: vec![BlockSpec::relu_stack(&[16]); 4],
        },
        distill: DistillSection {
            kind: DistillerKind::Fitnets,
            intermediate_spots: None,
            logit_spot: true,
            beta1: 1.0,
            beta2: None,
            beta3: 1.0,
            temperature: 4.0,
            at_power: 2.0,
            kl_t2_scaling: true,
        },
        policy: PolicySection::default(),
        optim: SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![22, 33, 39],
            lr_decay: 0.1,
        },
        train: TrainSection {
            epochs: 60,
            batch_size: 32,
            pretrain_epochs: Some(40),
            strategy: Strategy::Adaptive,
            seed: 1,
            teacher_mode: TeacherMode::Frozen,
            teacher_checkpoint: None,
            output_dir: None,
        },
    }
}

/// Full-scale schedule (240 epochs, batch 64, milestones 150/180/210) on the
/// same synthetic benchmark models.
pub fn paper_preset() -> ExperimentConfig {
    let mut cfg = desk_preset();
    cfg.optim.milestones = vec![150, 180, 210];
    cfg.train.epochs = 240;
    cfg.train.batch_size = 64;
    cfg.train.pretrain_epochs = Some(240);
    cfg
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "desk" => Ok(desk_preset()),
        "paper" => Ok(paper_preset()),
        other => Err(DistillError::Config(format!(
            "unknown preset '{other}' (expected desk|paper)"
        ))),
    }
}
