//! Subcommand implementations and the helpers they share.

pub mod nll;
pub mod raster;
pub mod sample;
pub mod train;
pub mod trajectories;
pub mod verify;

use std::fs;
use std::path::Path;

use flowmatch::autodiff::Checkpoint;
use flowmatch::model::{Mlp, Objective};
use flowmatch::ode::{Method, SolverCfg};
use flowmatch::paths::PathSchedule;
use serde::Deserialize;

use crate::config::DatasetSpec;
use crate::{CliError, SolverArgs};

/// Run metadata stored next to the weights in a training checkpoint.
#[derive(Debug, Clone, Deserialize)]
pub struct CheckpointMeta {
    pub schedule: PathSchedule,
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub step: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<(Mlp, CheckpointMeta), CliError> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        flowmatch::autodiff::AutodiffError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    let model = Mlp::from_checkpoint(&ck)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())
        .map_err(|e| CliError::Config(format!("{}: metadata: {e}", path.display())))?;
    meta.schedule.validate()?;
    Ok((model, meta))
}

/// Solver configurations requested on the command line, one per budget.
/// With no explicit solver, budgets select midpoint and no budgets select
/// dopri5.
pub fn solver_configs(args: &SolverArgs, default: SolverCfg) -> Result<Vec<SolverCfg>, CliError> {
    let method = match &args.solver {
        Some(name) => Method::parse(name)
            .ok_or_else(|| CliError::Config(format!("--solver: unknown method `{name}`")))?,
        None if !args.nfe.is_empty() => Method::Midpoint,
        None => default.method,
    };
    let cfgs = if method == Method::Dopri5 {
        if !args.nfe.is_empty() {
            return Err(CliError::Config("--nfe: budgets apply to fixed-step solvers only".into()));
        }
        let mut cfg = SolverCfg {
            method,
            ..default
        };
        cfg.atol = args.atol.unwrap_or(cfg.atol);
        cfg.rtol = args.rtol.unwrap_or(cfg.rtol);
        vec![cfg]
    } else {
        if args.atol.is_some() || args.rtol.is_some() {
            return Err(CliError::Config("--atol/--rtol: tolerances apply to dopri5 only".into()));
        }
        if args.nfe.is_empty() {
            vec![SolverCfg::fixed(method, default.steps)]
        } else {
            args.nfe
                .iter()
                .map(|&n| {
                    SolverCfg::with_nfe(method, n).map_err(|e| CliError::Config(format!("--nfe: {e}")))
                })
                .collect::<Result<_, _>>()?
        }
    };
    for c in &cfgs {
        c.validate().map_err(|e| CliError::Config(format!("solver: {e}")))?;
    }
    Ok(cfgs)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// `x0,x1,…` column names.
pub fn coord_header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("x{i}")).collect()
}

pub fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScheduleArg {
    Ot,
    Vp,
    Ve,
}

impl ScheduleArg {
    pub fn schedule(self) -> PathSchedule {
        match self {
            ScheduleArg::Ot => PathSchedule::ot(),
            ScheduleArg::Vp => PathSchedule::vp(),
            ScheduleArg::Ve => PathSchedule::ve(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SourceKind {
    /// A trained checkpoint (`--checkpoint`).
    Checkpoint,
    /// The exact marginal field of the mixture over `--point`s.
    Oracle,
    /// The conditional path of each `--point`.
    Conditional,
}

/// Where a field comes from, for the trajectory and raster commands.
#[derive(Debug, Clone, clap::Args)]
pub struct SourceArgs {
    #[arg(long, value_enum, default_value_t = SourceKind::Checkpoint)]
    pub source: SourceKind,
    #[arg(long)]
    pub checkpoint: Option<std::path::PathBuf>,
    /// Schedule for oracle and conditional sources.
    #[arg(long, value_enum, default_value_t = ScheduleArg::Ot)]
    pub schedule: ScheduleArg,
    /// Data point as comma-separated coordinates; repeatable.
    #[arg(long = "point", allow_hyphen_values = true)]
    pub points: Vec<String>,
}

impl SourceArgs {
    pub fn parsed_points(&self) -> Result<Vec<Vec<f64>>, CliError> {
        if self.points.is_empty() {
            return Err(CliError::Config("--point: oracle and conditional sources need data points".into()));
        }
        let pts = self
            .points
            .iter()
            .map(|s| {
                s.split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(|e| CliError::Config(format!("--point `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if pts.iter().any(|p| p.is_empty() || p.len() != pts[0].len()) {
            return Err(CliError::Config("--point: all points need the same dimension".into()));
        }
        Ok(pts)
    }

    pub fn checkpoint(&self) -> Result<(Mlp, CheckpointMeta), CliError> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Config("--checkpoint is required for the checkpoint source".into()))?;
        load_checkpoint(path)
    }
}
