use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Adam, AdamConfig, FieldModel, LrSchedule, Mlp};
use crate::autodiff::{AutodiffError, Tape};
use crate::data::DataSource;
use crate::objectives::{
    cfm_loss, ddpm_loss, scoreflow_loss, sm_loss, BoundModel, LossBatch, ObjectiveError,
    Parameterization, TimeSampling,
};
use crate::paths::PathSchedule;
use crate::rng::{substream, STREAM_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cfm,
    ScoreMatching,
    ScoreFlow,
    Ddpm,
}

impl Objective {
    /// Model output kind the objective trains.
    pub fn parameterization(&self) -> Parameterization {
        match self {
            Objective::Cfm => Parameterization::VectorField,
            Objective::ScoreMatching | Objective::ScoreFlow => Parameterization::Score,
            Objective::Ddpm => Parameterization::Noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint every this many steps; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub time_sampling: TimeSampling,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Decay of an exponential moving average of the parameters. When set,
    /// checkpoints and the returned model hold the averaged weights.
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 256,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            time_sampling: TimeSampling::Uniform,
            lr_schedule: LrSchedule::Constant,
            ema_decay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoint_steps: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("objective {objective:?} cannot train a {found} model")]
    Incompatible {
        objective: Objective,
        found: &'static str,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; training aborted")]
    NonFinite {
        step: usize,
        what: &'static str,
        last_good: Box<Mlp>,
        report: TrainReport,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint callback failed: {0}")]
    Checkpoint(String),
}

/// Trains `model` in place with Adam.
///
/// Batches come from the `batch` substream of `cfg.seed`. `on_checkpoint` is
/// called with the step count every `checkpoint_every` steps and after the
/// final step. On a non-finite loss, gradient or parameter the model is left
/// at its last finite state and the error carries a copy of it.
pub fn train(
    model: &mut Mlp,
    objective: Objective,
    source: &dyn DataSource,
    schedule: &PathSchedule,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Mlp) -> Result<(), String>,
) -> Result<TrainReport, TrainError> {
    let found = model.parameterization();
    if found != objective.parameterization() {
        return Err(TrainError::Incompatible {
            objective,
            found: found.name(),
        });
    }
    if objective == Objective::ScoreFlow && !matches!(schedule, PathSchedule::Vp { .. }) {
        return Err(TrainError::Config("score_flow needs the vp schedule".into()));
    }
    if source.dim() != model.dim() {
        return Err(TrainError::Config(format!(
            "data dimension {} does not match model dimension {}",
            source.dim(),
            model.dim()
        )));
    }
    if cfg.batch == 0 {
        return Err(TrainError::Config("batch must be positive".into()));
    }
    if let Some(d) = cfg.ema_decay {
        if !(0.0..1.0).contains(&d) {
            return Err(TrainError::Config(format!("ema_decay must lie in [0, 1), got {d}")));
        }
    }
    schedule.validate().map_err(ObjectiveError::from)?;

    let mut rng = substream(cfg.seed, STREAM_BATCH);
    let mut adam = Adam::new(cfg.optimizer, model.params());
    let mut report = TrainReport::default();
    let mut ema = cfg.ema_decay.map(|d| (d, model.clone()));
    let start = Instant::now();

    for step in 1..=cfg.steps {
        let batch = LossBatch::draw(source, schedule, cfg.batch, &mut rng, cfg.time_sampling)?;
        let tape = Tape::new();
        let bound = BoundModel::new(model, &tape);
        let out = match objective {
            Objective::Cfm => cfm_loss(&bound, schedule, &batch)?,
            Objective::ScoreMatching => sm_loss(&bound, schedule, &batch)?,
            Objective::ScoreFlow => scoreflow_loss(&bound, schedule, &batch)?,
            Objective::Ddpm => ddpm_loss(&bound, schedule, &batch)?,
        };
        let loss = out.value();
        let abort = |what, report: TrainReport, model: &Mlp| TrainError::NonFinite {
            step,
            what,
            last_good: Box::new(model.clone()),
            report,
        };
        if !loss.is_finite() {
            return Err(abort("loss", report, model));
        }
        let grads = bound.gradients(&tape.backward(out.loss)?);
        drop(bound);
        let grad_norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(abort("gradient", report, model));
        }
        let previous = model.params().to_vec();
        adam.set_lr(cfg.lr_schedule.lr(cfg.optimizer.lr, step, cfg.steps));
        adam.step(model.params_mut(), &grads);
        if !model.params().iter().all(|p| p.all_finite()) {
            model.params_mut().clone_from_slice(&previous);
            return Err(abort("parameter", report, model));
        }
        if let Some((decay, avg)) = ema.as_mut() {
            for (a, p) in avg.params_mut().iter_mut().zip(model.params()) {
                for (a, p) in a.data_mut().iter_mut().zip(p.data()) {
                    *a = *decay * *a + (1.0 - *decay) * p;
                }
            }
        }
        report.losses.push(LossRecord {
            step,
            loss,
            grad_norm,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        let cadence = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if cadence || step == cfg.steps {
            let current = ema.as_ref().map_or(&*model, |(_, avg)| avg);
            on_checkpoint(step, current).map_err(TrainError::Checkpoint)?;
            report.checkpoint_steps.push(step);
        }
    }
    if let Some((_, avg)) = ema {
        *model = avg;
    }
    Ok(report)
}
