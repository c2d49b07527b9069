use std::path::{Path, PathBuf};

use clap::Args;
use flowmatch::ode::{solve_batch, solve_each, Method, ModelField, OdeError, SolveReport, SolveStatus, SolverCfg};
use flowmatch::rng::{standard_normal, substream, STREAM_NOISE};

use super::{coord_header, create_dir, load_checkpoint, solver_configs};
use crate::{CliError, OutArgs, SolverArgs};

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

/// Outcome for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub x: Vec<f64>,
    pub nfe: usize,
    pub status: String,
}

fn row(rep: Result<SolveReport, OdeError>, dim: usize) -> SampleRow {
    match rep {
        Ok(r) => SampleRow {
            status: match r.status {
                SolveStatus::Completed => "ok".into(),
                SolveStatus::MaxNfeExceeded => "max_nfe".into(),
            },
            x: r.y,
            nfe: r.nfe,
        },
        Err(e) => SampleRow {
            x: vec![f64::NAN; dim],
            nfe: 0,
            status: format!("failed: {e}"),
        },
    }
}

/// Pushes `noise` (n·d, row-major) through the field. Fixed-step solves run
/// as one batch and fall back to per-sample solves if the batch fails, so a
/// failure is attributed to the samples that caused it.
pub fn push_forward(
    field: &ModelField<'_>,
    noise: &[f64],
    dim: usize,
    span: (f64, f64),
    cfg: &SolverCfg,
) -> Vec<SampleRow> {
    let starts: Vec<Vec<f64>> = noise.chunks(dim).map(|c| c.to_vec()).collect();
    if cfg.method != Method::Dopri5 {
        if let Ok(rep) = solve_batch(field, noise, span, cfg, &[]) {
            let per = rep.nfe;
            let status = match rep.status {
                SolveStatus::Completed => "ok",
                SolveStatus::MaxNfeExceeded => "max_nfe",
            };
            return rep
                .y
                .chunks(dim)
                .map(|x| SampleRow {
                    x: x.to_vec(),
                    nfe: per,
                    status: status.into(),
                })
                .collect();
        }
    }
    solve_each(field, &starts, span, cfg)
        .into_iter()
        .map(|r| row(r, dim))
        .collect()
}

fn label(cfg: &SolverCfg) -> String {
    match cfg.method {
        Method::Dopri5 => "dopri5".into(),
        m => format!("nfe{}", cfg.steps * m.stages()),
    }
}

fn write_samples(path: &Path, dim: usize, rows: &[SampleRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(coord_header(dim));
    header.extend(["nfe".to_string(), "status".to_string()]);
    w.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.x.iter().map(|v| v.to_string()));
        rec.push(r.nfe.to_string());
        rec.push(r.status.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: SampleArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Config("--n: need at least one sample".into()));
    }
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let cfgs = solver_configs(&args.solver, SolverCfg::default())?;
    let dim = model.config().dim;
    let field = ModelField::new(&model, meta.schedule);
    let span = (0.0, meta.schedule.t_max());
    let noise = standard_normal(&mut substream(args.out.seed, STREAM_NOISE), args.n * dim);
    create_dir(&args.out.out)?;

    let mut summary = csv::Writer::from_path(args.out.out.join("nfe_summary.csv"))?;
    summary.write_record(["solver", "nfe_budget", "samples", "failed", "mean_nfe"])?;
    for cfg in &cfgs {
        let rows = push_forward(&field, &noise, dim, span, cfg);
        let name = label(cfg);
        write_samples(&args.out.out.join(format!("samples_{name}.csv")), dim, &rows)?;
        let failed = rows.iter().filter(|r| r.status != "ok").count();
        let mean_nfe = rows.iter().map(|r| r.nfe as f64).sum::<f64>() / rows.len() as f64;
        let budget = match cfg.method {
            Method::Dopri5 => String::new(),
            m => (cfg.steps * m.stages()).to_string(),
        };
        summary.write_record([
            cfg.method.name().to_string(),
            budget,
            rows.len().to_string(),
            failed.to_string(),
            mean_nfe.to_string(),
        ])?;
        eprintln!("{name}: {} samples, {failed} failed, mean NFE {mean_nfe:.1}", rows.len());
    }
    summary.flush()?;
    Ok(())
}
