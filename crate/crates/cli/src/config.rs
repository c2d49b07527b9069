//! Run configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "dataset": { "kind": "checkerboard" },
//!   "schedule": { "kind": "ot", "sigma_min": 1e-5 },
//!   "model": { "preset": "desk" },
//!   "objective": "cfm",
//!   "optimizer": { "lr": 1e-3 },
//!   "training": { "steps": 20000, "batch": 256,
//!                 "lr_schedule": { "kind": "polynomial_decay", "warmup": 500 } },
//!   "solver": { "method": "dopri5", "atol": 1e-5, "rtol": 1e-5 },
//!   "seed": 7,
//!   "output_dir": "runs/ot"
//! }
//! ```
//!
//! Unknown keys are rejected everywhere. Omitted sections take the defaults
//! shown by [`RunConfig::default`].

use std::fs;
use std::path::{Path, PathBuf};

use flowmatch::data::{read_dataset_csv, DataSource, FiniteDataset, ToyDataset, ToyKind};
use flowmatch::model::{Activation, AdamConfig, LrSchedule, ModelConfig, Objective, TimeEmbedding, TrainConfig};
use flowmatch::objectives::{Parameterization, TimeSampling};
use flowmatch::ode::SolverCfg;
use flowmatch::paths::PathSchedule;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Checkerboard,
    EightGaussians,
    TwoMoons,
    StandardNormal,
    /// A fixed point set, resampled uniformly.
    Points { points: Vec<Vec<f64>> },
    /// A file written by the dataset CSV writer.
    Csv { path: PathBuf },
}

impl DatasetSpec {
    pub fn toy_kind(&self) -> Option<ToyKind> {
        match self {
            DatasetSpec::Checkerboard => Some(ToyKind::Checkerboard),
            DatasetSpec::EightGaussians => Some(ToyKind::EightGaussians),
            DatasetSpec::TwoMoons => Some(ToyKind::TwoMoons),
            DatasetSpec::StandardNormal => Some(ToyKind::StandardNormal),
            _ => None,
        }
    }

    pub fn source(&self) -> Result<Box<dyn DataSource>, CliError> {
        if let Some(kind) = self.toy_kind() {
            return Ok(Box::new(ToyDataset::new(kind)));
        }
        let points = match self {
            DatasetSpec::Points { points } => points.clone(),
            DatasetSpec::Csv { path } => {
                let file = fs::File::open(path)
                    .map_err(|e| CliError::Config(format!("dataset.path {}: {e}", path.display())))?;
                read_dataset_csv(file)?.points
            }
            _ => unreachable!("toy kinds handled above"),
        };
        FiniteDataset::new(points)
            .map(|d| Box::new(d) as Box<dyn DataSource>)
            .map_err(|e| CliError::Config(format!("dataset: {e}")))
    }

    /// `n` held-out points: toy data from substream `data` of `seed`,
    /// finite data as stored.
    pub fn points(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, CliError> {
        if let Some(kind) = self.toy_kind() {
            return Ok(ToyDataset::new(kind).sample(n, seed).into_iter().map(|p| p.to_vec()).collect());
        }
        match self {
            DatasetSpec::Points { points } => Ok(points.iter().take(n).cloned().collect()),
            DatasetSpec::Csv { path } => {
                let file = fs::File::open(path)?;
                Ok(read_dataset_csv(file)?.points.into_iter().take(n).collect())
            }
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `desk` (3×64) or `paper-2d` (5×512).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<TimeEmbedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameterization: Option<Parameterization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub time_sampling: TimeSampling,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

fn default_steps() -> usize {
    20_000
}

fn default_batch() -> usize {
    256
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch: default_batch(),
            checkpoint_every: 0,
            time_sampling: TimeSampling::Uniform,
            lr_schedule: LrSchedule::Constant,
            ema_decay: None,
        }
    }
}

fn default_objective() -> Objective {
    Objective::Cfm
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    #[serde(default = "PathSchedule::ot")]
    pub schedule: PathSchedule,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub solver: SolverCfg,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSpec::Checkerboard,
            schedule: PathSchedule::ot(),
            model: ModelSpec::default(),
            objective: default_objective(),
            optimizer: AdamConfig::default(),
            training: TrainingSpec::default(),
            solver: SolverCfg::default(),
            seed: 0,
            output_dir: default_output(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: String| Err(CliError::Config(format!("{key}: {msg}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if let Err(e) = self.schedule.validate() {
            return bad("schedule", e.to_string());
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return bad("optimizer.lr", "must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return bad("optimizer.beta1/beta2", "must lie in [0, 1)".into());
        }
        if self.training.batch == 0 {
            return bad("training.batch", "must be positive".into());
        }
        if let Some(d) = self.training.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("training.ema_decay", format!("must lie in [0, 1), got {d}"));
            }
        }
        if let Err(e) = self.solver.validate() {
            return bad("solver", e.to_string());
        }
        if let DatasetSpec::Points { points } = &self.dataset {
            if points.is_empty() || points.iter().any(|p| p.len() != points[0].len() || p.is_empty()) {
                return bad("dataset.points", "need at least one point, all of equal dimension".into());
            }
        }
        if let Some(p) = &self.model.preset {
            if p != "desk" && p != "paper-2d" {
                return bad("model.preset", format!("unknown preset `{p}`"));
            }
        }
        let param = self.model.parameterization.unwrap_or(self.objective.parameterization());
        if param != self.objective.parameterization() {
            return bad(
                "model.parameterization",
                format!("{} cannot be trained with objective {:?}", param.name(), self.objective),
            );
        }
        if self.objective == Objective::ScoreFlow && !matches!(self.schedule, PathSchedule::Vp { .. }) {
            return bad("objective", "score_flow requires the vp schedule".into());
        }
        if param != Parameterization::VectorField && !matches!(self.schedule, PathSchedule::Vp { .. }) {
            return bad("schedule", "score and noise models are sampled through the vp conversion".into());
        }
        Ok(())
    }

    pub fn data_dim(&self) -> Result<usize, CliError> {
        Ok(self.dataset.source()?.dim())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let dim = self.data_dim()?;
        let base = match self.model.preset.as_deref() {
            None | Some("desk") => ModelConfig::desk(dim),
            Some(name) => ModelConfig::preset(name, dim)
                .ok_or_else(|| CliError::Config(format!("model.preset: `{name}` needs 2D data")))?,
        };
        let cfg = ModelConfig {
            dim,
            widths: self.model.widths.clone().unwrap_or(base.widths),
            activation: self.model.activation.unwrap_or(base.activation),
            embedding: self.model.embedding.unwrap_or(base.embedding),
            parameterization: self
                .model
                .parameterization
                .unwrap_or(self.objective.parameterization()),
        };
        cfg.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.training.steps,
            batch: self.training.batch,
            optimizer: self.optimizer,
            seed: self.seed,
            checkpoint_every: self.training.checkpoint_every,
            time_sampling: self.training.time_sampling,
            lr_schedule: self.training.lr_schedule,
            ema_decay: self.training.ema_decay,
        }
    }
}
