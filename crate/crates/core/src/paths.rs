//! Gaussian conditional probability paths.
//!
//! Every path here has the form `p_t(x | x1) = N(x | a(t)·x1, σ(t)² I)`,
//! with `t = 0` the noise end and `t = 1` the data end. The conditional
//! flow is `ψ_t(x0) = σ(t)·x0 + a(t)·x1` and the vector field generating it
//! is
//!
//! ```text
//! u_t(x | x1) = σ'(t)/σ(t) · (x − a(t)·x1) + a'(t)·x1
//! ```
//!
//! Three schedules are provided:
//!
//! * `Ot`: `a = t`, `σ = 1 − (1 − σ_min)·t` (straight lines, constant speed).
//! * `Vp`: `a = α(1−t)`, `σ = sqrt(1 − α(1−t)²)`, `α(s) = exp(−T(s)/2)`,
//!   `T(s) = s·β_min + s²(β_max − β_min)/2`.
//! * `Ve`: `a = 1`, `σ = σ_ve(1−t)` with the geometric noise level
//!   `σ_ve(s) = σ_small·(σ_large/σ_small)^s`. Its `t = 0` marginal is
//!   `N(x1, σ_large²)`, not the standard normal.
//!
//! VP and VE are restricted to `t ∈ [0, 1 − t_eps]`; OT is defined on all
//! of `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-5;
pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;
pub const DEFAULT_T_EPS: f64 = 1e-5;
pub const DEFAULT_SIGMA_SMALL: f64 = 0.01;
pub const DEFAULT_SIGMA_LARGE: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("t = {t} outside [{lo}, {hi}] for the {schedule} schedule (truncated at t_eps = {t_eps})")]
    Domain {
        schedule: &'static str,
        t: f64,
        lo: f64,
        hi: f64,
        t_eps: f64,
    },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("conditional std is not positive (σ = {sigma}) at t = {t}")]
    Singular { t: f64, sigma: f64 },
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error("{0} is not supported for this schedule")]
    Unsupported(&'static str),
}

fn default_sigma_min() -> f64 {
    DEFAULT_SIGMA_MIN
}
fn default_beta_min() -> f64 {
    DEFAULT_BETA_MIN
}
fn default_beta_max() -> f64 {
    DEFAULT_BETA_MAX
}
fn default_t_eps() -> f64 {
    DEFAULT_T_EPS
}
fn default_sigma_small() -> f64 {
    DEFAULT_SIGMA_SMALL
}
fn default_sigma_large() -> f64 {
    DEFAULT_SIGMA_LARGE
}

/// Schedule of a Gaussian conditional path.
///
/// Serialized as `{"kind": "ot", "sigma_min": ...}`,
/// `{"kind": "vp", "beta_min": ..., "beta_max": ..., "t_eps": ...}` or
/// `{"kind": "ve", "sigma_small": ..., "sigma_large": ..., "t_eps": ...}`.
/// Missing parameters take the defaults above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PathSchedule {
    Ot {
        #[serde(default = "default_sigma_min")]
        sigma_min: f64,
    },
    Vp {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
        #[serde(default = "default_t_eps")]
        t_eps: f64,
    },
    Ve {
        #[serde(default = "default_sigma_small")]
        sigma_small: f64,
        #[serde(default = "default_sigma_large")]
        sigma_large: f64,
        #[serde(default = "default_t_eps")]
        t_eps: f64,
    },
}

/// Scalar coefficients of a path at one time: `μ = a·x1`, `μ' = da·x1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCoefficients {
    pub a: f64,
    pub da: f64,
    pub sigma: f64,
    pub dsigma: f64,
}

impl PathCoefficients {
    /// `σ'/σ`, the contraction rate of the conditional field.
    pub fn rate(&self) -> f64 {
        self.dsigma / self.sigma
    }
}

/// `(μ_t(x1), σ_t(x1), μ'_t(x1), σ'_t(x1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanStd {
    pub mean: Vec<f64>,
    pub std: f64,
    pub dmean: Vec<f64>,
    pub dstd: f64,
}

/// One reparameterized draw from a conditional path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSample {
    pub t: f64,
    pub x1: Vec<f64>,
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
    /// `dψ_t/dt (x0)`, the CFM regression target.
    pub target: Vec<f64>,
}

impl Default for PathSchedule {
    fn default() -> Self {
        Self::ot()
    }
}

impl PathSchedule {
    pub fn ot() -> Self {
        Self::Ot {
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }

    pub fn ot_with(sigma_min: f64) -> Self {
        Self::Ot { sigma_min }
    }

    pub fn vp() -> Self {
        Self::Vp {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            t_eps: DEFAULT_T_EPS,
        }
    }

    pub fn ve() -> Self {
        Self::Ve {
            sigma_small: DEFAULT_SIGMA_SMALL,
            sigma_large: DEFAULT_SIGMA_LARGE,
            t_eps: DEFAULT_T_EPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ot { .. } => "ot",
            Self::Vp { .. } => "vp",
            Self::Ve { .. } => "ve",
        }
    }

    pub fn validate(&self) -> Result<(), PathError> {
        let bad = |msg: String| Err(PathError::InvalidParameter(msg));
        match *self {
            Self::Ot { sigma_min } => {
                if !(sigma_min >= 0.0 && sigma_min < 1.0) {
                    return bad(format!("sigma_min = {sigma_min} must lie in [0, 1)"));
                }
            }
            Self::Vp {
                beta_min,
                beta_max,
                t_eps,
            } => {
                if !(beta_min > 0.0 && beta_max >= beta_min) {
                    return bad(format!("need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}"));
                }
                if !(t_eps > 0.0 && t_eps < 1.0) {
                    return bad(format!("t_eps = {t_eps} must lie in (0, 1)"));
                }
            }
            Self::Ve {
                sigma_small,
                sigma_large,
                t_eps,
            } => {
                if !(sigma_small > 0.0 && sigma_large > sigma_small) {
                    return bad(format!(
                        "need 0 < sigma_small < sigma_large, got {sigma_small}, {sigma_large}"
                    ));
                }
                if !(t_eps >= 0.0 && t_eps < 1.0) {
                    return bad(format!("t_eps = {t_eps} must lie in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Valid time interval `[0, t_max]`.
    pub fn t_max(&self) -> f64 {
        match *self {
            Self::Ot { .. } => 1.0,
            Self::Vp { t_eps, .. } | Self::Ve { t_eps, .. } => 1.0 - t_eps,
        }
    }

    fn t_eps(&self) -> f64 {
        match *self {
            Self::Ot { .. } => 0.0,
            Self::Vp { t_eps, .. } | Self::Ve { t_eps, .. } => t_eps,
        }
    }

    pub fn check_time(&self, t: f64) -> Result<(), PathError> {
        let hi = self.t_max();
        if (0.0..=hi).contains(&t) {
            Ok(())
        } else {
            Err(PathError::Domain {
                schedule: self.name(),
                t,
                lo: 0.0,
                hi,
                t_eps: self.t_eps(),
            })
        }
    }

    /// VP noise rate `β(s) = β_min + s(β_max − β_min)` in diffusion time.
    pub fn beta(&self, s: f64) -> Option<f64> {
        match *self {
            Self::Vp {
                beta_min, beta_max, ..
            } => Some(beta_min + s * (beta_max - beta_min)),
            _ => None,
        }
    }

    /// VP integrated rate `T(s) = ∫₀ˢ β`.
    pub fn integrated_beta(&self, s: f64) -> Option<f64> {
        match *self {
            Self::Vp {
                beta_min, beta_max, ..
            } => Some(s * beta_min + 0.5 * s * s * (beta_max - beta_min)),
            _ => None,
        }
    }

    /// VE noise level `σ_ve(s)` in diffusion time.
    pub fn ve_sigma(&self, s: f64) -> Option<f64> {
        match *self {
            Self::Ve {
                sigma_small,
                sigma_large,
                ..
            } => Some(sigma_small * (sigma_large / sigma_small).powf(s)),
            _ => None,
        }
    }

    /// Path coefficients with exact analytic derivatives.
    pub fn coefficients(&self, t: f64) -> Result<PathCoefficients, PathError> {
        self.check_time(t)?;
        Ok(self.coefficients_unchecked(t))
    }

    pub(crate) fn coefficients_unchecked(&self, t: f64) -> PathCoefficients {
        match *self {
            Self::Ot { sigma_min } => PathCoefficients {
                a: t,
                da: 1.0,
                // Exact at both ends: σ_0 = 1, σ_1 = σ_min.
                sigma: (1.0 - t) + sigma_min * t,
                dsigma: -(1.0 - sigma_min),
            },
            Self::Vp {
                beta_min, beta_max, ..
            } => {
                let s = 1.0 - t;
                let big_t = s * beta_min + 0.5 * s * s * (beta_max - beta_min);
                let beta = beta_min + s * (beta_max - beta_min);
                let alpha = (-0.5 * big_t).exp();
                // 1 − α² without cancellation near the data end.
                let var = -(-big_t).exp_m1();
                let sigma = var.sqrt();
                PathCoefficients {
                    a: alpha,
                    da: 0.5 * beta * alpha,
                    sigma,
                    dsigma: -0.5 * beta * alpha * alpha / sigma,
                }
            }
            Self::Ve {
                sigma_small,
                sigma_large,
                ..
            } => {
                let log_ratio = (sigma_large / sigma_small).ln();
                let sigma = sigma_small * (log_ratio * (1.0 - t)).exp();
                PathCoefficients {
                    a: 1.0,
                    da: 0.0,
                    sigma,
                    dsigma: -log_ratio * sigma,
                }
            }
        }
    }

    pub fn mean_std(&self, t: f64, x1: &[f64]) -> Result<MeanStd, PathError> {
        let c = self.coefficients(t)?;
        Ok(MeanStd {
            mean: x1.iter().map(|v| c.a * v).collect(),
            std: c.sigma,
            dmean: x1.iter().map(|v| c.da * v).collect(),
            dstd: c.dsigma,
        })
    }

    /// `ψ_t(x0) = σ_t·x0 + μ_t(x1)`.
    pub fn conditional_flow(&self, t: f64, x0: &[f64], x1: &[f64]) -> Result<Vec<f64>, PathError> {
        check_dims(x0, x1)?;
        let c = self.coefficients(t)?;
        Ok(x0
            .iter()
            .zip(x1)
            .map(|(z, y)| c.sigma * z + c.a * y)
            .collect())
    }

    /// `dψ_t/dt (x0) = σ'_t·x0 + μ'_t(x1)`.
    pub fn conditional_flow_velocity(
        &self,
        t: f64,
        x0: &[f64],
        x1: &[f64],
    ) -> Result<Vec<f64>, PathError> {
        check_dims(x0, x1)?;
        let c = self.coefficients(t)?;
        Ok(x0
            .iter()
            .zip(x1)
            .map(|(z, y)| c.dsigma * z + c.da * y)
            .collect())
    }

    /// Conditional vector field `u_t(x | x1)` in the general Gaussian form.
    pub fn conditional_vf(&self, t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>, PathError> {
        check_dims(x, x1)?;
        let c = self.coefficients(t)?;
        if !(c.sigma > 0.0) {
            return Err(PathError::Singular { t, sigma: c.sigma });
        }
        let rate = c.rate();
        Ok(x.iter()
            .zip(x1)
            .map(|(xi, yi)| rate * (xi - c.a * yi) + c.da * yi)
            .collect())
    }

    /// Schedule-specific closed form of the conditional vector field.
    ///
    /// * OT: `(x1 − (1 − σ_min)x) / (1 − (1 − σ_min)t)`
    /// * VP: `−T'(1−t)/2 · (e^{−T(1−t)}x − e^{−T(1−t)/2}x1) / (1 − e^{−T(1−t)})`
    /// * VE: `−σ_ve'(1−t)/σ_ve(1−t) · (x − x1)`
    ///
    /// Evaluated independently of [`Self::conditional_vf`] so the two can be
    /// cross-checked.
    pub fn closed_form_vf(&self, t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>, PathError> {
        check_dims(x, x1)?;
        self.check_time(t)?;
        match *self {
            Self::Ot { sigma_min } => {
                let denom = 1.0 - (1.0 - sigma_min) * t;
                if !(denom > 0.0) {
                    return Err(PathError::Singular { t, sigma: denom });
                }
                Ok(x.iter()
                    .zip(x1)
                    .map(|(xi, yi)| (yi - (1.0 - sigma_min) * xi) / denom)
                    .collect())
            }
            Self::Vp {
                beta_min, beta_max, ..
            } => {
                let s = 1.0 - t;
                let big_t = s * beta_min + 0.5 * s * s * (beta_max - beta_min);
                let dbig_t = beta_min + s * (beta_max - beta_min);
                let e_full = (-big_t).exp();
                let e_half = (-0.5 * big_t).exp();
                let denom = -(-big_t).exp_m1();
                Ok(x.iter()
                    .zip(x1)
                    .map(|(xi, yi)| -0.5 * dbig_t * (e_full * xi - e_half * yi) / denom)
                    .collect())
            }
            Self::Ve {
                sigma_small,
                sigma_large,
                ..
            } => {
                // σ_ve'(s)/σ_ve(s) = ln(σ_large/σ_small) for the geometric schedule.
                let s = 1.0 - t;
                let sig = sigma_small * (sigma_large / sigma_small).powf(s);
                let dsig = sig * (sigma_large / sigma_small).ln();
                Ok(x.iter()
                    .zip(x1)
                    .map(|(xi, yi)| -(dsig / sig) * (xi - yi))
                    .collect())
            }
        }
    }

    /// `∇ₓ log p_t(x | x1) = −(x − μ_t(x1)) / σ_t²`.
    pub fn conditional_score(&self, t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>, PathError> {
        check_dims(x, x1)?;
        let c = self.coefficients(t)?;
        if !(c.sigma > 0.0) {
            return Err(PathError::Singular { t, sigma: c.sigma });
        }
        let inv_var = 1.0 / (c.sigma * c.sigma);
        Ok(x.iter()
            .zip(x1)
            .map(|(xi, yi)| -(xi - c.a * yi) * inv_var)
            .collect())
    }

    /// `log N(x | μ_t(x1), σ_t² I)`.
    pub fn conditional_log_density(&self, t: f64, x: &[f64], x1: &[f64]) -> Result<f64, PathError> {
        check_dims(x, x1)?;
        let c = self.coefficients(t)?;
        Ok(gaussian_log_density(x, x1, c.a, c.sigma))
    }

    pub fn sample_conditional(
        &self,
        t: f64,
        x0: &[f64],
        x1: &[f64],
    ) -> Result<ConditionalSample, PathError> {
        Ok(ConditionalSample {
            t,
            x1: x1.to_vec(),
            x0: x0.to_vec(),
            xt: self.conditional_flow(t, x0, x1)?,
            target: self.conditional_flow_velocity(t, x0, x1)?,
        })
    }
}

/// `log N(x | a·x1, σ² I)`.
pub(crate) fn gaussian_log_density(x: &[f64], x1: &[f64], a: f64, sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x
        .iter()
        .zip(x1)
        .map(|(xi, yi)| {
            let r = xi - a * yi;
            r * r
        })
        .sum();
    -0.5 * sq / (sigma * sigma) - d * sigma.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// `log N(x | 0, I)`.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), PathError> {
    if a.len() != b.len() {
        return Err(PathError::Dimension(a.len(), b.len()));
    }
    Ok(())
}

/// Norm-wise relative error `‖a − b‖ / ‖b‖` (absolute when `b = 0`).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, substream};
    use rand::Rng;

    fn schedules() -> [PathSchedule; 3] {
        [PathSchedule::ot(), PathSchedule::vp(), PathSchedule::ve()]
    }

    #[test]
    fn ot_midpoint_mean_std() {
        let s = PathSchedule::ot_with(0.0);
        let ms = s.mean_std(0.5, &[2.0, 0.0]).unwrap();
        assert_eq!(ms.mean, vec![1.0, 0.0]);
        assert_eq!(ms.std, 0.5);
        assert_eq!(ms.dmean, vec![2.0, 0.0]);
        assert_eq!(ms.dstd, -1.0);
        for &t in &[0.0, 0.13, 0.7, 1.0] {
            let ms = s.mean_std(t, &[1.0]).unwrap();
            assert_eq!(ms.std, 1.0 - t);
            assert_eq!(ms.dstd, -1.0);
        }
    }

    #[test]
    fn vp_noise_end_values() {
        let s = PathSchedule::vp();
        assert_eq!(s.integrated_beta(0.0), Some(0.0));
        let t1 = s.integrated_beta(1.0).unwrap();
        assert!((t1 - 10.05).abs() < 1e-12);
        let c = s.coefficients(0.0).unwrap();
        let alpha1 = (-5.025f64).exp();
        assert!((c.a - alpha1).abs() < 1e-15);
        assert!((c.a - 6.57e-3).abs() < 1e-5);
        assert!((c.sigma - 0.99998).abs() < 1e-5);
        // σ'_t by central differences of σ_t
        let h = 1e-6;
        for &t in &[0.1, 0.5, 0.9] {
            let fd = (s.coefficients(t + h).unwrap().sigma - s.coefficients(t - h).unwrap().sigma)
                / (2.0 * h);
            let c = s.coefficients(t).unwrap();
            assert!((fd - c.dsigma).abs() < 1e-6 * c.dsigma.abs().max(1.0));
            let fd_a = (s.coefficients(t + h).unwrap().a - s.coefficients(t - h).unwrap().a) / (2.0 * h);
            assert!((fd_a - c.da).abs() < 1e-6 * c.da.abs().max(1.0));
        }
    }

    #[test]
    fn boundary_conditions() {
        let x1 = [0.7, -1.3];
        let ot = PathSchedule::ot();
        let c0 = ot.coefficients(0.0).unwrap();
        assert_eq!((c0.a, c0.sigma), (0.0, 1.0));
        let c1 = ot.coefficients(1.0).unwrap();
        assert_eq!(c1.a, 1.0);
        assert_eq!(c1.sigma, DEFAULT_SIGMA_MIN);
        // VP reaches the data only up to the truncation.
        let vp = PathSchedule::vp();
        let ms = vp.mean_std(vp.t_max(), &x1).unwrap();
        let mean_gap = relative_error(&ms.mean, &x1);
        assert!(mean_gap < 1e-5, "{mean_gap}");
        assert!(ms.std < 2e-3, "{}", ms.std);
        // VE starts from the wide Gaussian around x1.
        let ve = PathSchedule::ve();
        assert!((ve.coefficients(0.0).unwrap().sigma - DEFAULT_SIGMA_LARGE).abs() < 1e-9);
        for s in schedules() {
            let mut t = 0.0;
            while t <= s.t_max() {
                assert!(s.coefficients(t).unwrap().sigma > 0.0);
                t += 1e-3;
            }
        }
    }

    #[test]
    fn domain_errors_name_truncation() {
        let vp = PathSchedule::vp();
        let err = vp.coefficients(1.0).unwrap_err();
        assert!(matches!(err, PathError::Domain { schedule: "vp", .. }));
        assert!(err.to_string().contains("t_eps"));
        assert!(PathSchedule::ot().coefficients(1.0).is_ok());
        assert!(PathSchedule::ot().coefficients(-0.1).is_err());
        assert!(PathSchedule::ve().coefficients(1.5).is_err());
    }

    #[test]
    fn flow_examples() {
        let s = PathSchedule::ot_with(0.0);
        let x0 = [0.3, -0.8];
        let x1 = [2.0, 1.0];
        assert_eq!(s.conditional_flow(0.0, &x0, &x1).unwrap(), x0.to_vec());
        assert_eq!(s.conditional_flow(1.0, &x0, &x1).unwrap(), x1.to_vec());
        let s = PathSchedule::ot_with(0.1);
        let xt = s.conditional_flow(0.5, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        for v in xt {
            assert!((v - 0.55).abs() < 1e-15);
        }
        assert_eq!(
            s.conditional_flow(0.5, &[1.0], &[1.0, 2.0]),
            Err(PathError::Dimension(1, 2))
        );
    }

    #[test]
    fn vf_examples() {
        let s = PathSchedule::ot_with(0.0);
        assert_eq!(s.conditional_vf(0.0, &[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.conditional_vf(0.5, &[0.5], &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(s.closed_form_vf(0.5, &[0.5], &[1.0]).unwrap(), vec![1.0]);
        // σ_t = 0 at t = 1 when σ_min = 0.
        assert!(matches!(
            s.conditional_vf(1.0, &[0.5], &[1.0]),
            Err(PathError::Singular { .. })
        ));
    }

    #[test]
    fn score_examples() {
        let s = PathSchedule::vp();
        let x1 = [0.4, -2.0];
        let mean = s.mean_std(0.3, &x1).unwrap().mean;
        assert_eq!(s.conditional_score(0.3, &mean, &x1).unwrap(), vec![0.0, 0.0]);
        // Near the noise end α ≈ 6.6e-3, so the score is close to −x.
        let sc = s.conditional_score(0.0, &[1.0, 0.0], &x1).unwrap();
        assert!((sc[0] + 1.0).abs() < 1e-2 && sc[1].abs() < 2e-2, "{sc:?}");
        // At t = 0 the OT path is N(0, 1): score(2) = −2.
        let ot = PathSchedule::ot_with(0.0);
        assert_eq!(ot.conditional_score(0.0, &[2.0], &[5.0]).unwrap(), vec![-2.0]);
        // VE time at which the path is N(0, 4) around x1 = 0: score(2) = −0.5.
        let ve = PathSchedule::ve();
        let t = 1.0 - (2.0f64 / DEFAULT_SIGMA_SMALL).ln() / (DEFAULT_SIGMA_LARGE / DEFAULT_SIGMA_SMALL).ln();
        assert!((ve.coefficients(t).unwrap().sigma - 2.0).abs() < 1e-12);
        let sc = ve.conditional_score(t, &[2.0], &[0.0]).unwrap();
        assert!((sc[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn flow_vf_consistency() {
        let mut rng = substream(11, "paths-fd");
        let h = 1e-5;
        for s in schedules() {
            for _ in 0..300 {
                let t = rng.random_range(0.01..0.99);
                let x0 = standard_normal(&mut rng, 2);
                let x1 = standard_normal(&mut rng, 2);
                let plus = s.conditional_flow(t + h, &x0, &x1).unwrap();
                let minus = s.conditional_flow(t - h, &x0, &x1).unwrap();
                let fd: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
                let xt = s.conditional_flow(t, &x0, &x1).unwrap();
                let u = s.conditional_vf(t, &xt, &x1).unwrap();
                let err = relative_error(&fd, &u);
                assert!(err <= 1e-6, "{} t={t} err={err}", s.name());
            }
        }
    }

    #[test]
    fn ot_trajectories_are_straight() {
        let mut rng = substream(12, "paths-ot");
        for &sigma_min in &[0.0, 1e-5, 0.1] {
            let s = PathSchedule::ot_with(sigma_min);
            for _ in 0..50 {
                let x0 = standard_normal(&mut rng, 3);
                let x1 = standard_normal(&mut rng, 3);
                let u0 = s
                    .conditional_vf(0.0, &s.conditional_flow(0.0, &x0, &x1).unwrap(), &x1)
                    .unwrap();
                let x = standard_normal(&mut rng, 3);
                let g0: Vec<f64> = s.conditional_vf(0.0, &x, &x1).unwrap();
                for &t in &[0.2, 0.5, 0.9] {
                    let xt = s.conditional_flow(t, &x0, &x1).unwrap();
                    let ut = s.conditional_vf(t, &xt, &x1).unwrap();
                    assert!(relative_error(&ut, &u0) <= 1e-12);
                    // u_t(x|x1)·(1 − (1 − σ_min)t) does not depend on t for fixed x.
                    let scaled: Vec<f64> = s
                        .closed_form_vf(t, &x, &x1)
                        .unwrap()
                        .iter()
                        .map(|v| v * (1.0 - (1.0 - sigma_min) * t))
                        .collect();
                    assert!(relative_error(&scaled, &g0) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn closed_forms_agree_with_general_form() {
        let mut rng = substream(13, "paths-dual");
        for s in schedules() {
            for _ in 0..1000 {
                let t = rng.random_range(0.0..s.t_max());
                let x = standard_normal(&mut rng, 2);
                let x1 = standard_normal(&mut rng, 2);
                let general = s.conditional_vf(t, &x, &x1).unwrap();
                let closed = s.closed_form_vf(t, &x, &x1).unwrap();
                let err = relative_error(&closed, &general);
                assert!(err <= 1e-12, "{} t={t} err={err}", s.name());
            }
        }
    }

    #[test]
    fn push_forward_moments() {
        let n = 100_000;
        let mut rng = substream(14, "paths-mc");
        let x1 = [0.8, -0.4];
        for s in schedules() {
            let t = 0.6;
            let ms = s.mean_std(t, &x1).unwrap();
            let mut sum = [0.0; 2];
            let mut sum_sq = [0.0; 2];
            for _ in 0..n {
                let x0 = standard_normal(&mut rng, 2);
                let xt = s.conditional_flow(t, &x0, &x1).unwrap();
                for k in 0..2 {
                    sum[k] += xt[k];
                    sum_sq[k] += xt[k] * xt[k];
                }
            }
            for k in 0..2 {
                let mean = sum[k] / n as f64;
                let var = sum_sq[k] / n as f64 - mean * mean;
                let se_mean = ms.std / (n as f64).sqrt();
                assert!((mean - ms.mean[k]).abs() <= 3.0 * se_mean, "{} mean", s.name());
                // Var of the sample std is ≈ σ²/(2n).
                let se_std = ms.std / (2.0 * n as f64).sqrt();
                assert!((var.sqrt() - ms.std).abs() <= 3.0 * se_std, "{} std", s.name());
            }
        }
    }

    #[test]
    fn schedule_serde_round_trip() {
        for s in schedules() {
            let text = serde_json::to_string(&s).unwrap();
            let back: PathSchedule = serde_json::from_str(&text).unwrap();
            assert_eq!(back, s);
        }
        let vp: PathSchedule = serde_json::from_str(r#"{"kind":"vp"}"#).unwrap();
        assert_eq!(vp, PathSchedule::vp());
        let err = serde_json::from_str::<PathSchedule>(r#"{"kind":"ot","sigma":0.1}"#).unwrap_err();
        assert!(err.to_string().contains("sigma"));
    }
}
