use std::path::PathBuf;

use clap::{Args, ValueEnum};
use flowmatch::data::{quantized_synthetic, read_dataset_csv, QuantizedMixture};
use flowmatch::ode::{
    bpd, log_likelihood_batch, CnfDensity, DivergenceMode, LikelihoodCfg, LogDensity,
    MixtureDensity, ModelField, ProbeKind, SolverCfg,
};
use serde_json::json;

use super::{create_dir, load_checkpoint, mean_stderr, solver_configs};
use crate::{CliError, OutArgs, SolverArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Args)]
pub struct NllArgs {
    /// Trained checkpoint. Required unless `--reference` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset CSV to evaluate.
    #[arg(long, conflicts_with = "held_out")]
    pub data: Option<PathBuf>,
    /// Fresh draws from the checkpoint's dataset.
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    /// Probe vectors per Hutchinson estimate.
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
    #[arg(long, value_enum, default_value_t = ProbeArg::Rademacher)]
    pub probe_distribution: ProbeArg,
    /// Dequantization draws for bits-per-dimension on quantized data,
    /// comma separated (e.g. 1,5,15).
    #[arg(long, value_delimiter = ',')]
    pub k_dequant: Vec<usize>,
    /// Quantized examples drawn for the BPD table.
    #[arg(long, default_value_t = 100)]
    pub quantized: usize,
    /// Dimension of the quantized data when no checkpoint is given.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Score the quantized data under its generating mixture instead of a model.
    #[arg(long)]
    pub reference: bool,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Rademacher,
    Gaussian,
}

fn likelihood_cfg(args: &NllArgs, t_hi: f64) -> Result<LikelihoodCfg, CliError> {
    let solver = solver_configs(&args.solver, SolverCfg::default())?;
    if solver.len() != 1 {
        return Err(CliError::Config("--nfe: give a single budget for likelihoods".into()));
    }
    let mode = match args.mode {
        Mode::Exact => DivergenceMode::Exact,
        Mode::Hutchinson => {
            if args.probes == 0 {
                return Err(CliError::Config("--probes: need at least one".into()));
            }
            DivergenceMode::Hutchinson {
                probes: args.probes,
                distribution: match args.probe_distribution {
                    ProbeArg::Rademacher => ProbeKind::Rademacher,
                    ProbeArg::Gaussian => ProbeKind::Gaussian,
                },
            }
        }
    };
    Ok(LikelihoodCfg::new(solver[0], mode).with_span(0.0, t_hi))
}

pub fn run(args: NllArgs) -> Result<(), CliError> {
    create_dir(&args.out.out)?;
    if !args.k_dequant.is_empty() {
        return run_bpd(&args);
    }
    if args.reference {
        return Err(CliError::Config("--reference: only meaningful with --k-dequant".into()));
    }
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
    let (model, meta) = load_checkpoint(path)?;
    let points = match (&args.data, args.held_out) {
        (Some(p), _) => read_dataset_csv(std::fs::File::open(p)?)?.points,
        (None, n) => {
            let spec = meta
                .dataset
                .as_ref()
                .ok_or_else(|| CliError::Config("checkpoint has no dataset; pass --data".into()))?;
            spec.points(n.unwrap_or(1000), args.out.seed)?
        }
    };
    let dim = model.config().dim;
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(CliError::Config(format!(
            "data dimension {} does not match model dimension {dim}",
            bad.len()
        )));
    }
    let field = ModelField::new(&model, meta.schedule);
    let cfg = likelihood_cfg(&args, meta.schedule.t_max())?;
    let results = log_likelihood_batch(&field, &points, &cfg, args.out.seed);

    let mut w = csv::Writer::from_path(args.out.out.join("nll.csv"))?;
    w.write_record(["example_id", "logp", "nfe", "mode", "seed"])?;
    let mut logps = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (logp, nfe) = match r {
            Ok(r) => {
                logps.push(r.logp);
                (r.logp, r.nfe)
            }
            Err(e) => {
                failures.push(format!("example {i}: {e}"));
                (f64::NAN, 0)
            }
        };
        w.write_record([
            i.to_string(),
            logp.to_string(),
            nfe.to_string(),
            cfg.mode.name().to_string(),
            args.out.seed.to_string(),
        ])?;
    }
    w.flush()?;
    let nll: Vec<f64> = logps.iter().map(|v| -v).collect();
    let (mean, stderr) = mean_stderr(&nll);
    let summary = json!({
        "examples": points.len(),
        "failed": failures.len(),
        "mode": cfg.mode.name(),
        "seed": args.out.seed,
        "mean_nll": mean,
        "stderr": stderr,
        "mean_nll_per_dim": mean / dim as f64,
    });
    std::fs::write(
        args.out.out.join("nll_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!("NLL {mean:.4} ± {stderr:.4} nats ({:.4} per dim, {} examples)", mean / dim as f64, nll.len());
    if !failures.is_empty() {
        return Err(CliError::Numeric(format!(
            "{} of {} likelihood solves failed; first: {}",
            failures.len(),
            points.len(),
            failures[0]
        )));
    }
    Ok(())
}

fn run_bpd(args: &NllArgs) -> Result<(), CliError> {
    if args.k_dequant.iter().any(|&k| k == 0) {
        return Err(CliError::Config("--k-dequant: K must be at least 1".into()));
    }
    let loaded = match (&args.checkpoint, args.reference) {
        (Some(_), true) => {
            return Err(CliError::Config("--reference and --checkpoint are exclusive".into()))
        }
        (Some(p), false) => Some(load_checkpoint(p)?),
        (None, true) => None,
        (None, false) => return Err(CliError::Config("--checkpoint or --reference is required".into())),
    };
    let dim = loaded.as_ref().map_or(args.dim, |(m, _)| m.config().dim);
    let pixels: Vec<Vec<i64>> = quantized_synthetic(dim, args.quantized, args.out.seed)?
        .into_iter()
        .map(|r| r.into_iter().map(i64::from).collect())
        .collect();
    let (name, rows) = match &loaded {
        Some((model, meta)) => {
            let field = ModelField::new(model, meta.schedule);
            let density = CnfDensity {
                field,
                cfg: likelihood_cfg(args, meta.schedule.t_max())?,
            };
            let name = match meta.objective {
                Some(o) => format!("{}-{}", json!(o).as_str().unwrap_or("model"), meta.schedule.name()),
                None => "model".to_string(),
            };
            (name, sweep(&density, &pixels, &args.k_dequant, args.out.seed)?)
        }
        None => {
            let density = MixtureDensity {
                mixture: QuantizedMixture::default(),
                dim,
            };
            ("reference".to_string(), sweep(&density, &pixels, &args.k_dequant, args.out.seed)?)
        }
    };

    let mut long = csv::Writer::from_path(args.out.out.join("bpd.csv"))?;
    long.write_record(["model", "k", "mean_bpd", "stderr", "examples", "seed"])?;
    for (k, mean, se) in &rows {
        long.write_record([
            name.clone(),
            k.to_string(),
            mean.to_string(),
            se.to_string(),
            pixels.len().to_string(),
            args.out.seed.to_string(),
        ])?;
    }
    long.flush()?;

    let mut table = csv::Writer::from_path(args.out.out.join("bpd_table.csv"))?;
    let mut header = vec!["model".to_string()];
    header.extend(rows.iter().map(|(k, _, _)| format!("K={k}")));
    table.write_record(&header)?;
    let mut rec = vec![name.clone()];
    rec.extend(rows.iter().map(|(_, m, _)| format!("{m:.4}")));
    table.write_record(&rec)?;
    table.flush()?;

    println!("{}", header.join("\t"));
    println!("{}", rec.join("\t"));
    Ok(())
}

fn sweep<D: LogDensity>(
    density: &D,
    pixels: &[Vec<i64>],
    ks: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>, CliError> {
    ks.iter()
        .map(|&k| {
            let rep = bpd(density, pixels, k, seed)?;
            Ok((k, rep.mean, rep.stderr))
        })
        .collect()
}
