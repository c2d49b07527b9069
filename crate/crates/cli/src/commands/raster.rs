use std::io::Write;
use std::path::Path;

use clap::Args;
use flowmatch::ode::{log_likelihood_batch, DivergenceMode, LikelihoodCfg, ModelField, SolverCfg};
use flowmatch::oracle::MixtureOracle;
use flowmatch::paths::{standard_normal_log_density, PathSchedule};
use rayon::prelude::*;

use super::{create_dir, solver_configs, SourceArgs, SourceKind};
use crate::{CliError, OutArgs, SolverArgs};

#[derive(Debug, Clone, Args)]
pub struct RasterArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Times to render, comma separated; clamped to the schedule's range.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
    pub times: Vec<f64>,
    /// Pixels per side; must be odd so the origin is the centre pixel.
    #[arg(long, default_value_t = 65)]
    pub size: usize,
    /// The image covers `[-extent, extent]²`.
    #[arg(long, default_value_t = 3.0)]
    pub extent: f64,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

/// Row-major grid, top row first; pixel `(r, c)` sits at
/// `(−e + c·h, e − r·h)` with `h = 2e/(size−1)`.
pub fn pixel_centres(size: usize, extent: f64) -> Vec<Vec<f64>> {
    let h = 2.0 * extent / (size - 1) as f64;
    (0..size)
        .flat_map(|r| (0..size).map(move |c| vec![-extent + c as f64 * h, extent - r as f64 * h]))
        .collect()
}

/// Binary greyscale PGM, scaled so the largest value maps to 255.
pub fn write_pgm(path: &Path, size: usize, values: &[f64]) -> Result<(), CliError> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{size} {size}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| level(*v, max)).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

fn level(v: f64, max: f64) -> u8 {
    if max > 0.0 && v.is_finite() {
        (255.0 * (v / max).clamp(0.0, 1.0)).round() as u8
    } else {
        0
    }
}

// Black, purple, orange, pale yellow.
const RAMP: [[f64; 3]; 4] = [[0.0, 0.0, 4.0], [120.0, 28.0, 109.0], [237.0, 105.0, 37.0], [252.0, 255.0, 164.0]];

fn colour(level: u8) -> [u8; 3] {
    let x = level as f64 / 255.0 * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    }
    out
}

/// Binary colour PPM of the same scaled values.
pub fn write_ppm(path: &Path, size: usize, values: &[f64]) -> Result<(), CliError> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{size} {size}\n255\n")?;
    for v in values {
        f.write_all(&colour(level(*v, max)))?;
    }
    f.flush()?;
    Ok(())
}

fn check_dim(dim: usize) -> Result<(), CliError> {
    if dim != 2 {
        return Err(CliError::Config(format!("raster needs d = 2, got d = {dim}")));
    }
    Ok(())
}

pub fn run(args: RasterArgs) -> Result<(), CliError> {
    if args.size < 3 || args.size % 2 == 0 {
        return Err(CliError::Config("--size must be odd and at least 3".into()));
    }
    if !(args.extent > 0.0) {
        return Err(CliError::Config("--extent must be positive".into()));
    }
    let pixels = pixel_centres(args.size, args.extent);
    let mut frames: Vec<(f64, Vec<f64>)> = Vec::new();
    match args.source.source {
        SourceKind::Checkpoint => {
            let (model, meta) = args.source.checkpoint()?;
            check_dim(model.config().dim)?;
            let solver = solver_configs(&args.solver, SolverCfg::default())?;
            let field = ModelField::new(&model, meta.schedule);
            for &t in &args.times {
                let t = t.clamp(0.0, meta.schedule.t_max());
                let values = if t == 0.0 {
                    pixels.iter().map(|x| standard_normal_log_density(x).exp()).collect()
                } else {
                    let cfg = LikelihoodCfg::new(solver[0], DivergenceMode::Exact).with_span(0.0, t);
                    log_likelihood_batch(&field, &pixels, &cfg, args.out.seed)
                        .into_iter()
                        .map(|r| r.map(|r| r.logp.exp()))
                        .collect::<Result<Vec<f64>, _>>()?
                };
                frames.push((t, values));
            }
        }
        SourceKind::Oracle | SourceKind::Conditional => {
            let points = args.source.parsed_points()?;
            check_dim(points[0].len())?;
            let schedule: PathSchedule = args.source.schedule.schedule();
            let oracle = MixtureOracle::uniform(points, schedule)?;
            for &t in &args.times {
                let t = t.clamp(0.0, schedule.t_max());
                let values = pixels
                    .par_iter()
                    .map(|x| oracle.marginal_density(t, x))
                    .collect::<Result<Vec<f64>, _>>()?;
                frames.push((t, values));
            }
        }
    }
    create_dir(&args.out.out)?;
    for (t, values) in &frames {
        let stem = format!("density_t{t:.3}");
        write_pgm(&args.out.out.join(format!("{stem}.pgm")), args.size, values)?;
        write_ppm(&args.out.out.join(format!("{stem}.ppm")), args.size, values)?;
    }
    Ok(())
}
