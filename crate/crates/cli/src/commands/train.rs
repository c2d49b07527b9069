use std::path::{Path, PathBuf};

use clap::Args;
use flowmatch::model::{train, LossRecord, Mlp, TrainError};
use serde_json::json;

use super::create_dir;
use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Loads a config and applies command-line overrides.
pub fn resolve(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(steps) = args.steps {
        cfg.training.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metadata(cfg: &RunConfig, step: usize) -> serde_json::Value {
    json!({
        "schedule": cfg.schedule,
        "objective": cfg.objective,
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "step": step,
    })
}

fn save(model: &Mlp, cfg: &RunConfig, step: usize, path: &Path) -> Result<(), CliError> {
    model
        .to_checkpoint(metadata(cfg, step))
        .save(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_losses(dir: &Path, losses: &[LossRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
    w.write_record(["step", "loss", "grad_norm"])?;
    for r in losses {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.grad_norm.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(["step", "wall_time_secs"])?;
    for r in losses {
        w.write_record([r.step.to_string(), r.elapsed_secs.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&args)?;
    let source = cfg.dataset.source()?;
    let mut model = Mlp::init(cfg.model_config()?, cfg.seed)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;

    let mut on_checkpoint = |step: usize, m: &Mlp| {
        if step == cfg.training.steps {
            return Ok(());
        }
        save(m, &cfg, step, &dir.join(format!("checkpoint_step{step}.json"))).map_err(|e| e.to_string())
    };
    let result = train(
        &mut model,
        cfg.objective,
        source.as_ref(),
        &cfg.schedule,
        &cfg.train_config(),
        &mut on_checkpoint,
    );
    match result {
        Ok(report) => {
            write_losses(&dir, &report.losses)?;
            save(&model, &cfg, cfg.training.steps, &dir.join("checkpoint.json"))?;
            if let Some(last) = report.losses.last() {
                eprintln!("step {}: loss {:.6}", last.step, last.loss);
            }
            eprintln!("wrote {}", dir.display());
            Ok(())
        }
        Err(TrainError::NonFinite {
            step,
            what,
            last_good,
            report,
        }) => {
            write_losses(&dir, &report.losses)?;
            save(&last_good, &cfg, step - 1, &dir.join("checkpoint-last-good.json"))?;
            Err(CliError::Numeric(format!(
                "non-finite {what} at step {step}; last good parameters in checkpoint-last-good.json"
            )))
        }
        Err(TrainError::Incompatible { .. }) | Err(TrainError::Config(_)) => {
            Err(CliError::Config(result.unwrap_err().to_string()))
        }
        Err(e) => Err(CliError::Numeric(e.to_string())),
    }
}
