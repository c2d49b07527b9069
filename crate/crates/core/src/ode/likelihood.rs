use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_probes, integrate, velocity_and_divergence, BatchField, OdeError, ProbeKind, SolveStatus, SolverCfg};
use crate::paths::standard_normal_log_density;
use crate::rng::{indexed_substream, STREAM_PROBES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceMode {
    #[default]
    Exact,
    Hutchinson {
        #[serde(default = "one")]
        probes: usize,
        #[serde(default)]
        distribution: ProbeKind,
    },
}

fn one() -> usize {
    1
}

impl DivergenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            DivergenceMode::Exact => "exact",
            DivergenceMode::Hutchinson { .. } => "hutchinson",
        }
    }
}

/// Density of `x` at the noise end of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    #[default]
    StandardNormal,
    /// Isotropic `N(0, std² I)`.
    Gaussian { std: f64 },
}

impl Prior {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match *self {
            Prior::StandardNormal => standard_normal_log_density(x),
            Prior::Gaussian { std } => {
                let z: Vec<f64> = x.iter().map(|v| v / std).collect();
                standard_normal_log_density(&z) - x.len() as f64 * std.ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodCfg {
    pub solver: SolverCfg,
    #[serde(default)]
    pub mode: DivergenceMode,
    /// Noise end of the flow.
    #[serde(default)]
    pub t_lo: f64,
    /// Data end of the flow.
    #[serde(default = "unit")]
    pub t_hi: f64,
    #[serde(default)]
    pub prior: Prior,
}

fn unit() -> f64 {
    1.0
}

impl LikelihoodCfg {
    pub fn new(solver: SolverCfg, mode: DivergenceMode) -> Self {
        Self {
            solver,
            mode,
            t_lo: 0.0,
            t_hi: 1.0,
            prior: Prior::StandardNormal,
        }
    }

    pub fn with_span(mut self, t_lo: f64, t_hi: f64) -> Self {
        self.t_lo = t_lo;
        self.t_hi = t_hi;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodResult {
    pub logp: f64,
    pub nfe: usize,
    /// Point reached at the noise end.
    pub x0: Vec<f64>,
    /// Accumulated `∫ div v dt`.
    pub divergence_integral: f64,
}

/// `log p(x₁)` under the flow of `field`; probes (Hutchinson mode only) are
/// drawn once from `probe_rng` and reused at every evaluation.
pub fn log_likelihood<F: BatchField + ?Sized>(
    field: &F,
    x1: &[f64],
    cfg: &LikelihoodCfg,
    probe_rng: &mut Pcg64,
) -> Result<LikelihoodResult, OdeError> {
    let d = field.dim();
    if x1.len() != d {
        return Err(OdeError::Dimension { dim: d, len: x1.len() });
    }
    if !(cfg.t_hi > cfg.t_lo) {
        return Err(OdeError::Config(format!("empty span [{}, {}]", cfg.t_lo, cfg.t_hi)));
    }
    let probes = match cfg.mode {
        DivergenceMode::Exact => None,
        DivergenceMode::Hutchinson { probes, distribution } => {
            if probes == 0 {
                return Err(OdeError::Config("Hutchinson mode needs at least one probe".into()));
            }
            Some(draw_probes(probe_rng, distribution, probes, d))
        }
    };
    let t_hi = cfg.t_hi;
    let mut rhs = |s: f64, y: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
        let (v, div) = velocity_and_divergence(field, t_hi - s, &y[..d], probes.as_deref())?;
        for (o, vi) in dy[..d].iter_mut().zip(&v) {
            *o = -vi;
        }
        dy[d] = div[0];
        Ok(())
    };
    let mut y0 = x1.to_vec();
    y0.push(0.0);
    let rep = integrate(&mut rhs, &y0, (0.0, cfg.t_hi - cfg.t_lo), &cfg.solver, &[])?;
    if rep.status == SolveStatus::MaxNfeExceeded {
        return Err(OdeError::MaxNfe {
            max_nfe: cfg.solver.max_nfe,
            t: t_hi - rep.t_reached,
        });
    }
    let x0 = rep.y[..d].to_vec();
    let f = rep.y[d];
    Ok(LikelihoodResult {
        logp: cfg.prior.log_density(&x0) - f,
        nfe: rep.nfe,
        x0,
        divergence_integral: f,
    })
}

/// [`log_likelihood`] for many points in parallel; point `i` draws probes
/// from substream `probes/i` of `seed`.
pub fn log_likelihood_batch<F: BatchField + ?Sized>(
    field: &F,
    points: &[Vec<f64>],
    cfg: &LikelihoodCfg,
    seed: u64,
) -> Vec<Result<LikelihoodResult, OdeError>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = indexed_substream(seed, STREAM_PROBES, i as u64);
            log_likelihood(field, x, cfg, &mut rng)
        })
        .collect()
}
