//! ODE solves for sampling and likelihood evaluation.
//!
//! Sampling integrates `dx/dt = v_t(x)` from noise at `t = 0`. Likelihoods
//! integrate the augmented system
//!
//! ```text
//! dx/ds = −v_{1−s}(x),   df/ds = div v_{1−s}(x),   (x, f)(0) = (x₁, 0)
//! ```
//!
//! for `s ∈ [0, 1]` and return `log p₀(x(1)) − f(1)`. Divergences are exact
//! (one vector–Jacobian product per coordinate) or Hutchinson estimates
//! with probes held fixed for the whole solve.

mod bpd;
mod fields;
mod likelihood;
mod solver;

pub use bpd::{bpd, BpdReport, CnfDensity, LogDensity, MixtureDensity, UniformCube};
pub use fields::{
    BatchField, ConditionalField, LinearField, ModelField, Negated, OracleField, ZeroField,
};
pub use likelihood::{
    log_likelihood, log_likelihood_batch, DivergenceMode, LikelihoodCfg, LikelihoodResult, Prior,
};
pub use solver::{
    integrate, integrate_reverse, Method, Rhs, SolveReport, SolveStatus, SolverCfg,
};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::objectives::ObjectiveError;
use crate::paths::PathError;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("invalid solver setup: {0}")]
    Config(String),
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state or derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("NFE budget of {max_nfe} exhausted at t = {t}")]
    MaxNfe { max_nfe: usize, t: f64 },
    #[error("state of length {len} is not a batch of {dim}-dimensional points")]
    Dimension { dim: usize, len: usize },
    #[error("pixel value {0} outside 0..=255")]
    Pixel(i64),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("field evaluation failed: {0}")]
    Field(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Uniform on `{−1, 1}`.
    #[default]
    Rademacher,
    Gaussian,
}

/// `count` probe vectors of length `len`.
pub fn draw_probes(rng: &mut impl Rng, kind: ProbeKind, count: usize, len: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..len)
                .map(|_| match kind {
                    ProbeKind::Rademacher => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    ProbeKind::Gaussian => rng.sample(StandardNormal),
                })
                .collect()
        })
        .collect()
}

/// Velocity and per-point divergence. `probes = None` gives the exact trace
/// from `d` basis cotangents; otherwise the Hutchinson mean `zᵀ(∂v/∂x)z`.
pub fn velocity_and_divergence<F: BatchField + ?Sized>(
    field: &F,
    t: f64,
    x: &[f64],
    probes: Option<&[Vec<f64>]>,
) -> Result<(Vec<f64>, Vec<f64>), OdeError> {
    let d = field.dim();
    if d == 0 || x.len() % d != 0 {
        return Err(OdeError::Dimension { dim: d, len: x.len() });
    }
    let n = x.len() / d;
    match probes {
        None => {
            let basis: Vec<Vec<f64>> = (0..d)
                .map(|k| (0..x.len()).map(|i| if i % d == k { 1.0 } else { 0.0 }).collect())
                .collect();
            let (v, vjps) = field.velocity_vjps(t, x, &basis)?;
            let div = (0..n).map(|b| (0..d).map(|k| vjps[k][b * d + k]).sum()).collect();
            Ok((v, div))
        }
        Some(z) => {
            if z.is_empty() || z.iter().any(|p| p.len() != x.len()) {
                return Err(OdeError::Config("probes must match the state length".into()));
            }
            let (v, vjps) = field.velocity_vjps(t, x, z)?;
            let div = (0..n)
                .map(|b| {
                    let total: f64 = z
                        .iter()
                        .zip(&vjps)
                        .map(|(zj, gj)| (b * d..(b + 1) * d).map(|i| zj[i] * gj[i]).sum::<f64>())
                        .sum();
                    total / z.len() as f64
                })
                .collect();
            Ok((v, div))
        }
    }
}

/// Exact divergence at each point of `x`.
pub fn divergence_exact<F: BatchField + ?Sized>(field: &F, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
    Ok(velocity_and_divergence(field, t, x, None)?.1)
}

/// Hutchinson divergence estimate at each point of `x`, averaged over probes.
pub fn divergence_hutchinson<F: BatchField + ?Sized>(
    field: &F,
    t: f64,
    x: &[f64],
    probes: &[Vec<f64>],
) -> Result<Vec<f64>, OdeError> {
    Ok(velocity_and_divergence(field, t, x, Some(probes))?.1)
}

/// Solves `dx/dt = v_t(x)` for a whole batch at once (shared steps).
pub fn solve_batch<F: BatchField + ?Sized>(
    field: &F,
    x0: &[f64],
    span: (f64, f64),
    cfg: &SolverCfg,
    outputs: &[f64],
) -> Result<SolveReport, OdeError> {
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
        dy.copy_from_slice(&field.velocity(t, y)?);
        Ok(())
    };
    integrate(&mut rhs, x0, span, cfg, outputs)
}

/// Independent solves, one per starting point, run in parallel.
pub fn solve_each<F: BatchField + ?Sized>(
    field: &F,
    starts: &[Vec<f64>],
    span: (f64, f64),
    cfg: &SolverCfg,
) -> Vec<Result<SolveReport, OdeError>> {
    starts
        .par_iter()
        .map(|x0| solve_batch(field, x0, span, cfg, &[]))
        .collect()
}

#[cfg(test)]
mod tests;
