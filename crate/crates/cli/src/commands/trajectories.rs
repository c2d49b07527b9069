use clap::Args;
use flowmatch::ode::{solve_batch, BatchField, ModelField, OracleField, SolverCfg};
use flowmatch::oracle::MixtureOracle;
use flowmatch::paths::PathSchedule;
use flowmatch::rng::{standard_normal, substream, STREAM_NOISE};
use rayon::prelude::*;

use super::{coord_header, create_dir, solver_configs, SourceArgs, SourceKind};
use crate::{CliError, OutArgs, SolverArgs};

#[derive(Debug, Clone, Args)]
pub struct TrajectoryArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Number of trajectories.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Output times per trajectory, evenly spaced over the sampling span.
    #[arg(long, default_value_t = 51)]
    pub times: usize,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

/// `(sample_id, t, x)` rows.
type Rows = Vec<(usize, f64, Vec<f64>)>;

fn grid(t_max: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| if k + 1 == count { t_max } else { t_max * k as f64 / (count - 1) as f64 })
        .collect()
}

fn solved<F: BatchField>(field: &F, starts: &[Vec<f64>], times: &[f64], cfg: &SolverCfg) -> Result<Rows, CliError> {
    let span = (0.0, *times.last().expect("at least two times"));
    let per: Vec<Rows> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let rep = solve_batch(field, x0, span, cfg, times)?;
            Ok(rep.trajectory.into_iter().map(|(t, x)| (i, t, x)).collect())
        })
        .collect::<Result<_, CliError>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn run(args: TrajectoryArgs) -> Result<(), CliError> {
    if args.n == 0 || args.times < 2 {
        return Err(CliError::Config("--n must be positive and --times at least 2".into()));
    }
    let cfgs = solver_configs(&args.solver, SolverCfg::default())?;
    if cfgs.len() != 1 {
        return Err(CliError::Config("--nfe: give a single budget".into()));
    }
    let cfg = cfgs[0];
    let rows = match args.source.source {
        SourceKind::Checkpoint => {
            let (model, meta) = args.source.checkpoint()?;
            let dim = model.config().dim;
            let times = grid(meta.schedule.t_max(), args.times);
            let field = ModelField::new(&model, meta.schedule);
            solved(&field, &starts(args.out.seed, args.n, dim), &times, &cfg)?
        }
        SourceKind::Oracle => {
            let schedule = args.source.schedule.schedule();
            let oracle = MixtureOracle::uniform(args.source.parsed_points()?, schedule)?;
            let times = grid(schedule.t_max(), args.times);
            let field = OracleField { oracle: &oracle };
            solved(&field, &starts(args.out.seed, args.n, oracle.dim()), &times, &cfg)?
        }
        SourceKind::Conditional => {
            let schedule = args.source.schedule.schedule();
            let points = args.source.parsed_points()?;
            conditional(&schedule, &points, &starts(args.out.seed, args.n, points[0].len()), args.times)?
        }
    };
    let dim = rows.first().map_or(0, |r| r.2.len());
    create_dir(&args.out.out)?;
    let mut w = csv::Writer::from_path(args.out.out.join("trajectories.csv"))?;
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend(coord_header(dim));
    w.write_record(&header)?;
    for (i, t, x) in &rows {
        let mut rec = vec![i.to_string(), t.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Starting noise shared by every source with the same seed.
fn starts(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    standard_normal(&mut substream(seed, STREAM_NOISE), n * dim)
        .chunks(dim)
        .map(|c| c.to_vec())
        .collect()
}

/// Closed-form conditional flow `ψ_t(x₀)`; trajectory `i` follows data
/// point `i mod points.len()`.
fn conditional(schedule: &PathSchedule, points: &[Vec<f64>], starts: &[Vec<f64>], count: usize) -> Result<Rows, CliError> {
    let times = grid(schedule.t_max(), count);
    let mut rows = Vec::new();
    for (i, x0) in starts.iter().enumerate() {
        let x1 = &points[i % points.len()];
        for &t in &times {
            rows.push((i, t, schedule.conditional_flow(t, x0, x1)?));
        }
    }
    Ok(rows)
}
