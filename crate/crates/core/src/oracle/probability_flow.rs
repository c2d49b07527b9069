//! Probability-flow fields of the diffusion SDEs behind the VP and VE paths.
//!
//! Diffusion runs data → noise in its own time `τ = 1 − t`:
//!
//! * VP: `dy = −β(τ)/2 · y dτ + sqrt(β(τ)) dw`, `p_τ(y|y0) = N(e^{−T(τ)/2} y0, 1 − e^{−T(τ)})`
//! * VE: `dy = sqrt(d σ_ve²/dτ) dw`, `p_τ(y|y0) = N(y0, σ_ve(τ)²)`
//!
//! The deterministic field `w_τ = f_τ − g_τ²/2 · ∇log p_τ` shares the SDE's
//! marginals. Reversing time (`ũ_t = −w_{1−t}`) gives a noise → data field,
//! which must coincide with the conditional field of the path.

use crate::paths::{PathError, PathSchedule};

/// SDE and marginal coefficients at diffusion time `τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionCoefficients {
    /// Drift is linear: `f_τ(y) = drift_rate · y`.
    pub drift_rate: f64,
    /// Squared diffusion coefficient `g_τ²`.
    pub g2: f64,
    /// `p_τ(y|y0) = N(mean_scale · y0, std² I)`.
    pub mean_scale: f64,
    pub std: f64,
}

pub fn diffusion_coefficients(
    schedule: &PathSchedule,
    tau: f64,
) -> Result<DiffusionCoefficients, PathError> {
    match *schedule {
        PathSchedule::Vp {
            beta_min, beta_max, ..
        } => {
            let beta = beta_min + tau * (beta_max - beta_min);
            let big_t = tau * beta_min + 0.5 * tau * tau * (beta_max - beta_min);
            Ok(DiffusionCoefficients {
                drift_rate: -0.5 * beta,
                g2: beta,
                mean_scale: (-0.5 * big_t).exp(),
                std: (-(-big_t).exp_m1()).sqrt(),
            })
        }
        PathSchedule::Ve {
            sigma_small,
            sigma_large,
            ..
        } => {
            let log_ratio = (sigma_large / sigma_small).ln();
            let sigma = sigma_small * (log_ratio * tau).exp();
            Ok(DiffusionCoefficients {
                drift_rate: 0.0,
                // d/dτ σ² = 2 σ σ' = 2 ln(ratio) σ²
                g2: 2.0 * log_ratio * sigma * sigma,
                mean_scale: 1.0,
                std: sigma,
            })
        }
        PathSchedule::Ot { .. } => Err(PathError::Unsupported(
            "probability-flow field (the OT path has no diffusion SDE)",
        )),
    }
}

/// Reversed probability-flow field of the conditional diffusion path at
/// flow-matching time `t`.
pub fn probability_flow_vf(
    schedule: &PathSchedule,
    t: f64,
    x: &[f64],
    x1: &[f64],
) -> Result<Vec<f64>, PathError> {
    if x.len() != x1.len() {
        return Err(PathError::Dimension(x.len(), x1.len()));
    }
    schedule.check_time(t)?;
    let c = diffusion_coefficients(schedule, 1.0 - t)?;
    let inv_var = 1.0 / (c.std * c.std);
    Ok(x.iter()
        .zip(x1)
        .map(|(xi, yi)| {
            let score = -(xi - c.mean_scale * yi) * inv_var;
            let w = c.drift_rate * xi - 0.5 * c.g2 * score;
            -w
        })
        .collect())
}
