//! Exact marginal quantities for a finite weighted dataset.
//!
//! For data `{x1⁽ⁱ⁾}` with weights `wᵢ` the marginal path is the Gaussian
//! mixture `p_t(x) = Σᵢ wᵢ N(x | μ_t(x1⁽ⁱ⁾), σ_t² I)`, and the marginal field
//! is the posterior average of the conditional fields. All mixture
//! arithmetic goes through log-sum-exp: near `t = 1` the components are
//! σ_min-wide and plain density sums underflow.
//!
//! Everything here is a verification fixture; queries are `O(n)` and the
//! dataset is capped at [`MAX_POINTS`].

mod continuity;
mod probability_flow;

pub use continuity::{
    continuity_residual, DensityField, Drifted, GridSpec, ResidualReport, ResidualRow, Reversed,
};
pub use probability_flow::{diffusion_coefficients, probability_flow_vf, DiffusionCoefficients};

use thiserror::Error;

use crate::paths::{gaussian_log_density, PathError, PathSchedule};

pub const MAX_POINTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("dataset must contain between 1 and {MAX_POINTS} points, got {0}")]
    DatasetSize(usize),
    #[error("weights must be non-negative and sum to 1 (sum = {0})")]
    Weights(f64),
    #[error("inconsistent point dimensions")]
    Dimension,
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("grid dimension {0} not supported (1 to 3 axes)")]
    GridDimension(usize),
}

/// Mixture of conditional paths over a small dataset.
#[derive(Debug, Clone)]
pub struct MixtureOracle {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    schedule: PathSchedule,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl MixtureOracle {
    pub fn new(
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        schedule: PathSchedule,
    ) -> Result<Self, OracleError> {
        if points.is_empty() || points.len() > MAX_POINTS {
            return Err(OracleError::DatasetSize(points.len()));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) || weights.len() != points.len() {
            return Err(OracleError::Dimension);
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(OracleError::Weights(sum));
        }
        schedule.validate()?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            points,
            weights,
            log_weights,
            schedule,
        })
    }

    pub fn uniform(points: Vec<Vec<f64>>, schedule: PathSchedule) -> Result<Self, OracleError> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n], schedule)
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn schedule(&self) -> &PathSchedule {
        &self.schedule
    }

    fn check_x(&self, x: &[f64]) -> Result<(), OracleError> {
        if x.len() != self.dim() {
            return Err(PathError::Dimension(x.len(), self.dim()).into());
        }
        Ok(())
    }

    /// `log wᵢ + log N(x | μ_t(x1⁽ⁱ⁾), σ_t²)` for every component.
    fn joint_log_terms(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.check_x(x)?;
        let c = self.schedule.coefficients(t)?;
        Ok(self
            .points
            .iter()
            .zip(&self.log_weights)
            .map(|(p, lw)| lw + gaussian_log_density(x, p, c.a, c.sigma))
            .collect())
    }

    pub fn log_marginal_density(&self, t: f64, x: &[f64]) -> Result<f64, OracleError> {
        Ok(log_sum_exp(&self.joint_log_terms(t, x)?))
    }

    pub fn marginal_density(&self, t: f64, x: &[f64]) -> Result<f64, OracleError> {
        Ok(self.log_marginal_density(t, x)?.exp())
    }

    /// Posterior `P(x1⁽ⁱ⁾ | x_t = x)`.
    pub fn posterior(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        let terms = self.joint_log_terms(t, x)?;
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|v| (v - lse).exp()).collect())
    }

    fn posterior_average(
        &self,
        t: f64,
        x: &[f64],
        f: impl Fn(&[f64]) -> Result<Vec<f64>, PathError>,
    ) -> Result<Vec<f64>, OracleError> {
        let post = self.posterior(t, x)?;
        let mut out = vec![0.0; self.dim()];
        for (p, w) in self.points.iter().zip(&post) {
            if *w == 0.0 {
                continue;
            }
            let v = f(p)?;
            for (o, vi) in out.iter_mut().zip(&v) {
                *o += w * vi;
            }
        }
        Ok(out)
    }

    /// Marginal vector field `u_t(x)`.
    pub fn marginal_vf(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.posterior_average(t, x, |x1| self.schedule.conditional_vf(t, x, x1))
    }

    /// `∇ₓ log p_t(x)`.
    pub fn marginal_score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.posterior_average(t, x, |x1| self.schedule.conditional_score(t, x, x1))
    }

    /// Time reversal at `t`: `(ũ_t(x), u_{1−t}(x))` with `ũ_t = −u_{1−t}`.
    pub fn reversed_vf_check(&self, t: f64, x: &[f64]) -> Result<ReversedPair, OracleError> {
        let original = self.marginal_vf(1.0 - t, x)?;
        let reversed = original.iter().map(|v| -v).collect();
        Ok(ReversedPair { reversed, original })
    }

    /// Probability-flow field of the diffusion SDE behind a VP/VE schedule,
    /// built from the drift, the diffusion coefficient and the diffusion-time
    /// mixture score, then reversed into flow-matching time.
    pub fn probability_flow_vf(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.check_x(x)?;
        self.schedule.check_time(t)?;
        let tau = 1.0 - t;
        let coeffs = diffusion_coefficients(&self.schedule, tau)?;
        // Diffusion-time marginal: Σ wᵢ N(y | m(τ)·y0ᵢ, s(τ)² I).
        let terms: Vec<f64> = self
            .points
            .iter()
            .zip(&self.log_weights)
            .map(|(p, lw)| lw + gaussian_log_density(x, p, coeffs.mean_scale, coeffs.std))
            .collect();
        let lse = log_sum_exp(&terms);
        let mut score = vec![0.0; self.dim()];
        let inv_var = 1.0 / (coeffs.std * coeffs.std);
        for (p, term) in self.points.iter().zip(&terms) {
            let w = (term - lse).exp();
            for ((s, xi), yi) in score.iter_mut().zip(x).zip(p) {
                *s -= w * (xi - coeffs.mean_scale * yi) * inv_var;
            }
        }
        Ok(x.iter()
            .zip(&score)
            .map(|(xi, si)| -(coeffs.drift_rate * xi - 0.5 * coeffs.g2 * si))
            .collect())
    }
}

/// Output of [`MixtureOracle::reversed_vf_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReversedPair {
    pub reversed: Vec<f64>,
    pub original: Vec<f64>,
}

impl DensityField for MixtureOracle {
    fn dim(&self) -> usize {
        MixtureOracle::dim(self)
    }

    fn density(&self, t: f64, x: &[f64]) -> f64 {
        self.marginal_density(t, x).expect("oracle density query")
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.marginal_vf(t, x).expect("oracle velocity query")
    }
}
