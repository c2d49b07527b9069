//! Deterministic quadrature of the FM and CFM objectives against a mixture
//! oracle.
//!
//! Both losses are evaluated on the same tensor grid over `(t, x)`:
//!
//! ```text
//! L_FM  = Σ_t w_t Σ_x ω_x p_t(x)              ‖v_t(x) − u_t(x)‖²
//! L_CFM = Σ_t w_t Σ_x ω_x Σ_i π_i p_t(x|x⁽ⁱ⁾) ‖v_t(x) − u_t(x|x⁽ⁱ⁾)‖²
//! ```
//!
//! with trapezoid weights `w_t` (normalized to a mean over `t`) and `ω_x`.
//! Values and parameter gradients are returned together; each chunk of the
//! grid is recorded on its own tape and the chunk results are summed in grid
//! order, so the result does not depend on thread scheduling.

use rayon::prelude::*;

use super::{BoundModel, ObjectiveError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::model::FieldModel;
use crate::oracle::MixtureOracle;
use crate::paths::gaussian_log_density;

const CHUNK_ROWS: usize = 4096;
const MASS_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub t_lo: f64,
    pub t_hi: f64,
    pub time_points: usize,
    pub lower: f64,
    pub upper: f64,
    pub space_points: usize,
}

impl Default for Quadrature {
    /// 41 times on `[0, 0.9]` and an 81² grid on `[−4, 4]²`.
    fn default() -> Self {
        Self {
            t_lo: 0.0,
            t_hi: 0.9,
            time_points: 41,
            lower: -4.0,
            upper: 4.0,
            space_points: 81,
        }
    }
}

fn trapezoid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![lo], vec![1.0]);
    }
    let h = (hi - lo) / (n - 1) as f64;
    let nodes = (0..n).map(|k| lo + k as f64 * h).collect();
    let weights = (0..n)
        .map(|k| if k == 0 || k == n - 1 { 0.5 * h } else { h })
        .collect();
    (nodes, weights)
}

impl Quadrature {
    /// Time nodes with weights summing to one.
    pub fn time_nodes(&self) -> (Vec<f64>, Vec<f64>) {
        let (t, mut w) = trapezoid(self.t_lo, self.t_hi, self.time_points);
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        (t, w)
    }

    /// Grid points (row-major, flattened) and cell weights for `dim` axes.
    pub fn space_nodes(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let (axis, aw) = trapezoid(self.lower, self.upper, self.space_points);
        let n = self.space_points;
        let count = n.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        for idx in 0..count {
            let mut rem = idx;
            let mut w = 1.0;
            let mut coords = vec![0.0; dim];
            for k in (0..dim).rev() {
                coords[k] = axis[rem % n];
                w *= aw[rem % n];
                rem /= n;
            }
            points.extend(coords);
            weights.push(w);
        }
        (points, weights)
    }

    fn validate(&self, dim: usize) -> Result<(), ObjectiveError> {
        if !(1..=2).contains(&dim) {
            return Err(ObjectiveError::Unsupported("quadrature losses need d = 1 or 2"));
        }
        if self.time_points == 0
            || self.space_points < 2
            || !(self.upper > self.lower)
            || !(self.t_hi >= self.t_lo)
        {
            return Err(ObjectiveError::Batch(format!("degenerate quadrature {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureLoss {
    pub value: f64,
    /// Gradients in the model's parameter order.
    pub gradients: Vec<Tensor>,
    /// `Σ_x ω_x p_t(x)` per time node; 1 when the grid resolves `p_t`.
    pub mass: Vec<f64>,
    pub warning: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    Marginal,
    Conditional,
}

struct ChunkResult {
    value: f64,
    gradients: Vec<Tensor>,
    mass: f64,
}

fn row_weights(weights: &[f64], d: usize) -> Tensor {
    let data = weights.iter().flat_map(|&w| std::iter::repeat_n(w, d)).collect();
    Tensor::from_parts(vec![weights.len(), d], data)
}

fn weighted_sq<'t>(tape: &'t Tape, pred: Var<'t>, target: Tensor, w: &[f64], d: usize) -> Result<Var<'t>, ObjectiveError> {
    let diff = pred.sub(&tape.constant(target))?;
    Ok(diff.mul(&diff)?.mul(&tape.constant(row_weights(w, d)))?.sum())
}

fn chunk_loss(
    model: &dyn FieldModel,
    oracle: &MixtureOracle,
    target: Target,
    t: f64,
    t_weight: f64,
    points: &[f64],
    cell_weights: &[f64],
) -> Result<ChunkResult, ObjectiveError> {
    let d = oracle.dim();
    let rows = cell_weights.len();
    let schedule = oracle.schedule();
    let c = schedule.coefficients(t)?;
    let mut mass = 0.0;
    let mut marginal_w = Vec::with_capacity(rows);
    for (r, &w) in cell_weights.iter().enumerate() {
        let p = oracle.marginal_density(t, &points[r * d..(r + 1) * d])?;
        mass += w * p;
        marginal_w.push(t_weight * w * p);
    }
    let tape = Tape::new();
    let bound = BoundModel::new(model, &tape);
    let times = vec![t; rows];
    let pred = bound.forward(&times, tape.constant(Tensor::from_parts(vec![rows, d], points.to_vec())))?;
    let loss = match target {
        Target::Marginal => {
            let mut u = Vec::with_capacity(rows * d);
            for r in 0..rows {
                u.extend(oracle.marginal_vf(t, &points[r * d..(r + 1) * d])?);
            }
            weighted_sq(&tape, pred, Tensor::from_parts(vec![rows, d], u), &marginal_w, d)?
        }
        Target::Conditional => {
            let mut total: Option<Var> = None;
            for (x1, &pi) in oracle.points().iter().zip(oracle.weights()) {
                let mut u = Vec::with_capacity(rows * d);
                let mut w = Vec::with_capacity(rows);
                for (r, &cw) in cell_weights.iter().enumerate() {
                    let x = &points[r * d..(r + 1) * d];
                    u.extend(schedule.conditional_vf(t, x, x1)?);
                    let p = gaussian_log_density(x, x1, c.a, c.sigma).exp();
                    w.push(t_weight * cw * pi * p);
                }
                let term = weighted_sq(&tape, pred, Tensor::from_parts(vec![rows, d], u), &w, d)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => acc.add(&term)?,
                });
            }
            total.expect("oracle holds at least one point")
        }
    };
    let value = loss.item();
    let gradients = if model.params().is_empty() {
        Vec::new()
    } else {
        bound.gradients(&tape.backward(loss)?)
    };
    Ok(ChunkResult {
        value,
        gradients,
        mass,
    })
}

fn quadrature_loss(
    model: &dyn FieldModel,
    oracle: &MixtureOracle,
    quad: &Quadrature,
    target: Target,
) -> Result<QuadratureLoss, ObjectiveError> {
    let d = oracle.dim();
    quad.validate(d)?;
    if model.dim() != d {
        return Err(ObjectiveError::Batch(format!("model dim {} vs data dim {d}", model.dim())));
    }
    let (times, t_weights) = quad.time_nodes();
    let (points, cell_weights) = quad.space_nodes(d);
    let chunks: Vec<(usize, usize)> = (0..cell_weights.len())
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(cell_weights.len())))
        .collect();
    let jobs: Vec<(usize, (usize, usize))> = (0..times.len())
        .flat_map(|k| chunks.iter().map(move |&c| (k, c)))
        .collect();
    let results: Vec<Result<ChunkResult, ObjectiveError>> = jobs
        .par_iter()
        .map(|&(k, (lo, hi))| {
            chunk_loss(
                model,
                oracle,
                target,
                times[k],
                t_weights[k],
                &points[lo * d..hi * d],
                &cell_weights[lo..hi],
            )
        })
        .collect();

    let mut value = 0.0;
    let mut gradients: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut mass = vec![0.0; times.len()];
    for (&(k, _), res) in jobs.iter().zip(results) {
        let res = res?;
        value += res.value;
        mass[k] += res.mass;
        for (acc, g) in gradients.iter_mut().zip(&res.gradients) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    let worst = mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let warning = (worst > MASS_TOLERANCE).then(|| {
        format!("quadrature under-resolved: grid mass deviates from 1 by {worst:.3e}")
    });
    Ok(QuadratureLoss {
        value,
        gradients,
        mass,
        warning,
    })
}

/// Flow Matching loss against the oracle's marginal field.
pub fn fm_loss_exact(
    model: &dyn FieldModel,
    oracle: &MixtureOracle,
    quad: &Quadrature,
) -> Result<QuadratureLoss, ObjectiveError> {
    quadrature_loss(model, oracle, quad, Target::Marginal)
}

/// Conditional Flow Matching loss on the same grid as [`fm_loss_exact`].
pub fn cfm_loss_quadrature(
    model: &dyn FieldModel,
    oracle: &MixtureOracle,
    quad: &Quadrature,
) -> Result<QuadratureLoss, ObjectiveError> {
    quadrature_loss(model, oracle, quad, Target::Conditional)
}
