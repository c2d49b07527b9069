//! Training objectives.
//!
//! * CFM: regress `v_t(ψ_t(x₀))` onto `dψ_t/dt(x₀) = σ'_t x₀ + μ'_t(x₁)`.
//! * Score matching: regress a score model onto `∇log p_t(x|x₁)`, weighted
//!   by `λ(t) = σ_t²` (SM) or `λ(t) = β(1 − t)` (ScoreFlow, VP only).
//! * DDPM: regress a noise model onto `x₀`.
//!
//! Scores follow the usual sign convention, `s = ∇log p`, so a noise
//! prediction converts as `s = −ε/σ_t` and a VP score as
//! `u_t(x) = β(1 − t)/2 · (x + s_t(x))`.
//!
//! Losses are recorded on a tape as means over the batch of per-sample
//! squared errors.

mod quadrature;

pub use quadrature::{cfm_loss_quadrature, fm_loss_exact, Quadrature, QuadratureLoss};

use rand::Rng;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::data::DataSource;
use crate::model::FieldModel;
use crate::oracle::OracleError;
use crate::paths::{PathCoefficients, PathError, PathSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    VectorField,
    Score,
    Noise,
}

impl Parameterization {
    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::VectorField => "vector_field",
            Parameterization::Score => "score",
            Parameterization::Noise => "noise",
        }
    }
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("objective needs a {expected} model, got {found}")]
    Parameterization {
        expected: &'static str,
        found: &'static str,
    },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("malformed batch: {0}")]
    Batch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// i.i.d. uniform times.
    #[default]
    Uniform,
    /// One stratum per pair of batch elements; each pair is `(u, 1 − u)`.
    Stratified,
}

/// Times, data and noise for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub t: Vec<f64>,
    /// `[B, d]` data points.
    pub x1: Tensor,
    /// `[B, d]` standard-normal noise.
    pub x0: Tensor,
}

impl LossBatch {
    pub fn new(t: Vec<f64>, x1: Tensor, x0: Tensor) -> Result<Self, ObjectiveError> {
        if x1.shape().len() != 2 || x1.shape() != x0.shape() || x1.rows() != t.len() || t.is_empty() {
            return Err(ObjectiveError::Batch(format!(
                "t has {} entries, x1 {:?}, x0 {:?}",
                t.len(),
                x1.shape(),
                x0.shape()
            )));
        }
        Ok(Self { t, x1, x0 })
    }

    /// Draws `n` triples with `t` on `[0, t_max]` of the schedule.
    pub fn draw(
        source: &dyn DataSource,
        schedule: &PathSchedule,
        n: usize,
        rng: &mut Pcg64,
        sampling: TimeSampling,
    ) -> Result<Self, ObjectiveError> {
        let d = source.dim();
        let x1 = Tensor::new(vec![n, d], source.draw(rng, n))?;
        let t_max = schedule.t_max();
        let t = match sampling {
            TimeSampling::Uniform => (0..n).map(|_| t_max * rng.random::<f64>()).collect(),
            TimeSampling::Stratified => {
                let pairs = n.div_ceil(2);
                let mut t = Vec::with_capacity(n);
                for k in 0..pairs {
                    let u = (k as f64 + rng.random::<f64>()) / pairs as f64;
                    t.push(t_max * u);
                    t.push(t_max * (1.0 - u));
                }
                t.truncate(n);
                t
            }
        };
        let x0 = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(t, x1, Tensor::new(vec![n, d], x0)?)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x1.cols()
    }

    fn coefficients(&self, schedule: &PathSchedule) -> Result<Vec<PathCoefficients>, ObjectiveError> {
        self.t
            .iter()
            .map(|&t| schedule.coefficients(t).map_err(ObjectiveError::from))
            .collect()
    }

    /// `x_t = σ_t x₀ + a_t x₁` row by row, plus the per-row coefficients.
    pub fn noisy_points(&self, schedule: &PathSchedule) -> Result<(Tensor, Vec<PathCoefficients>), ObjectiveError> {
        let coeffs = self.coefficients(schedule)?;
        let d = self.dim();
        let data = self
            .x0
            .data()
            .iter()
            .zip(self.x1.data())
            .enumerate()
            .map(|(i, (x0, x1))| {
                let c = &coeffs[i / d];
                c.sigma * x0 + c.a * x1
            })
            .collect();
        Ok((Tensor::from_parts(vec![self.len(), d], data), coeffs))
    }
}

/// A model whose parameters are bound as leaves of one tape.
pub struct BoundModel<'m, 't> {
    model: &'m dyn FieldModel,
    params: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn new(model: &'m dyn FieldModel, tape: &'t Tape) -> Self {
        Self {
            model,
            params: model.bind(tape),
            tape,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn parameterization(&self) -> Parameterization {
        self.model.parameterization()
    }

    pub fn forward(&self, t: &[f64], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.model.forward_tape(&self.params, t, x)
    }

    /// Parameter gradients in the model's parameter order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|p| grads.get_or_zeros(*p)).collect()
    }

    fn require(&self, expected: Parameterization) -> Result<(), ObjectiveError> {
        let found = self.parameterization();
        if found != expected {
            return Err(ObjectiveError::Parameterization {
                expected: expected.name(),
                found: found.name(),
            });
        }
        Ok(())
    }
}

/// A fixed (parameter-free) map `(t, x) ↦ output`, for wiring analytic
/// fields in as models.
pub struct FnModel<F> {
    dim: usize,
    parameterization: Parameterization,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64], &Tensor) -> Tensor + Sync,
{
    pub fn new(dim: usize, parameterization: Parameterization, f: F) -> Self {
        Self {
            dim,
            parameterization,
            f,
        }
    }
}

impl<F> FieldModel for FnModel<F>
where
    F: Fn(&[f64], &Tensor) -> Tensor + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[Tensor] {
        &[]
    }

    fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    fn forward_tape<'t>(&self, _: &[Var<'t>], t: &[f64], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        Ok(x.tape().constant((self.f)(t, &x.value())))
    }
}

/// Scalar loss on the tape with its per-sample breakdown.
pub struct LossOutput<'t> {
    pub loss: Var<'t>,
    pub per_sample: Vec<f64>,
}

impl LossOutput<'_> {
    pub fn value(&self) -> f64 {
        self.loss.item()
    }
}

/// `1/B Σ_b λ_b ‖pred_b − target_b‖²`.
fn weighted_regression<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    target: Tensor,
    weights: Option<&[f64]>,
) -> Result<LossOutput<'t>, ObjectiveError> {
    let shape = target.shape().to_vec();
    let (rows, d) = (shape[0], shape[1]);
    let diff = pred.sub(&tape.constant(target))?;
    let values = diff.value();
    let mut per_sample: Vec<f64> = (0..rows)
        .map(|r| values.row(r).iter().map(|v| v * v).sum())
        .collect();
    let total = match weights {
        None => diff.squared_l2(),
        Some(w) => {
            for (p, wi) in per_sample.iter_mut().zip(w) {
                *p *= wi;
            }
            let expanded = w.iter().flat_map(|&wi| std::iter::repeat_n(wi, d)).collect();
            let wt = tape.constant(Tensor::new(shape, expanded)?);
            diff.mul(&diff)?.mul(&wt)?.sum()
        }
    };
    Ok(LossOutput {
        loss: total.scale(1.0 / rows as f64),
        per_sample,
    })
}

/// Reparameterized CFM loss: target `σ'_t x₀ + μ'_t(x₁)` at `x = ψ_t(x₀)`.
pub fn cfm_loss<'t>(
    model: &BoundModel<'_, 't>,
    schedule: &PathSchedule,
    batch: &LossBatch,
) -> Result<LossOutput<'t>, ObjectiveError> {
    model.require(Parameterization::VectorField)?;
    let (xt, coeffs) = batch.noisy_points(schedule)?;
    let d = batch.dim();
    let target = batch
        .x0
        .data()
        .iter()
        .zip(batch.x1.data())
        .enumerate()
        .map(|(i, (x0, x1))| {
            let c = &coeffs[i / d];
            c.da * x1 + c.dsigma * x0
        })
        .collect();
    let tape = model.tape();
    let pred = model.forward(&batch.t, tape.constant(xt))?;
    weighted_regression(tape, pred, Tensor::new(vec![batch.len(), d], target)?, None)
}

/// CFM loss on explicit points `x ~ p_t(·|x₁)` against the conditional field.
pub fn cfm_loss_conditional<'t>(
    model: &BoundModel<'_, 't>,
    schedule: &PathSchedule,
    t: &[f64],
    x: &Tensor,
    x1: &Tensor,
) -> Result<LossOutput<'t>, ObjectiveError> {
    model.require(Parameterization::VectorField)?;
    if x.shape() != x1.shape() || x.rows() != t.len() {
        return Err(ObjectiveError::Batch("x, x1 and t disagree in size".into()));
    }
    let mut target = Vec::with_capacity(x.len());
    for (r, &tr) in t.iter().enumerate() {
        target.extend(schedule.conditional_vf(tr, x.row(r), x1.row(r))?);
    }
    let tape = model.tape();
    let pred = model.forward(t, tape.constant(x.clone()))?;
    weighted_regression(tape, pred, Tensor::new(x.shape().to_vec(), target)?, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScoreWeighting {
    Variance,
    Beta,
}

fn score_loss<'t>(
    model: &BoundModel<'_, 't>,
    schedule: &PathSchedule,
    batch: &LossBatch,
    weighting: ScoreWeighting,
) -> Result<LossOutput<'t>, ObjectiveError> {
    model.require(Parameterization::Score)?;
    let (xt, coeffs) = batch.noisy_points(schedule)?;
    let weights: Vec<f64> = match weighting {
        ScoreWeighting::Variance => coeffs.iter().map(|c| c.sigma * c.sigma).collect(),
        ScoreWeighting::Beta => batch
            .t
            .iter()
            .map(|&t| {
                schedule
                    .beta(1.0 - t)
                    .ok_or(ObjectiveError::Unsupported("ScoreFlow weighting needs a VP schedule"))
            })
            .collect::<Result<_, _>>()?,
    };
    // ∇log p_t(x|x₁) at x = σ x₀ + μ is −x₀/σ.
    let d = batch.dim();
    let target = batch
        .x0
        .data()
        .iter()
        .enumerate()
        .map(|(i, x0)| -x0 / coeffs[i / d].sigma)
        .collect();
    let tape = model.tape();
    let pred = model.forward(&batch.t, tape.constant(xt))?;
    weighted_regression(tape, pred, Tensor::new(vec![batch.len(), d], target)?, Some(&weights))
}

/// Score matching with `λ(t) = σ_t²`.
pub fn sm_loss<'t>(
    model: &BoundModel<'_, 't>,
    schedule: &PathSchedule,
    batch: &LossBatch,
) -> Result<LossOutput<'t>, ObjectiveError> {
    score_loss(model, schedule, batch, ScoreWeighting::Variance)
}

/// Score matching with `λ(t) = β(1 − t)`.
pub fn scoreflow_loss<'t>(
    model: &BoundModel<'_, 't>,
    schedule: &PathSchedule,
    batch: &LossBatch,
) -> Result<LossOutput<'t>, ObjectiveError> {
    if !matches!(schedule, PathSchedule::Vp { .. }) {
        return Err(ObjectiveError::Unsupported("ScoreFlow weighting needs a VP schedule"));
    }
    score_loss(model, schedule, batch, ScoreWeighting::Beta)
}

/// Noise regression `‖ε_t(ψ_t(x₀)) − x₀‖²`.
pub fn ddpm_loss<'t>(
    model: &BoundModel<'_, 't>,
    schedule: &PathSchedule,
    batch: &LossBatch,
) -> Result<LossOutput<'t>, ObjectiveError> {
    model.require(Parameterization::Noise)?;
    let (xt, _) = batch.noisy_points(schedule)?;
    let tape = model.tape();
    let pred = model.forward(&batch.t, tape.constant(xt))?;
    weighted_regression(tape, pred, batch.x0.clone(), None)
}

/// `s = −ε/σ_t`.
pub fn noise_to_score(eps: &[f64], sigma: f64) -> Vec<f64> {
    eps.iter().map(|e| -e / sigma).collect()
}

/// `(c, k)` such that `u = c·(x + k·output)` for a score (`k = 1`) or noise
/// (`k = −1/σ_t`) model on the VP path.
fn vp_conversion(
    param: Parameterization,
    schedule: &PathSchedule,
    t: f64,
) -> Result<(f64, f64), ObjectiveError> {
    let beta = schedule.beta(1.0 - t).ok_or(ObjectiveError::Unsupported(
        "score and noise conversions are defined for the VP schedule only",
    ))?;
    let c = 0.5 * beta;
    match param {
        Parameterization::Score => Ok((c, 1.0)),
        Parameterization::Noise => Ok((c, -1.0 / schedule.coefficients(t)?.sigma)),
        Parameterization::VectorField => Ok((1.0, 0.0)),
    }
}

/// Converts raw model outputs at a shared time `t` into vector-field values.
pub fn to_vector_field(
    param: Parameterization,
    output: &[f64],
    schedule: &PathSchedule,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    if output.len() != x.len() {
        return Err(ObjectiveError::Batch("output and x lengths differ".into()));
    }
    if param == Parameterization::VectorField {
        return Ok(output.to_vec());
    }
    schedule.check_time(t)?;
    let (c, k) = vp_conversion(param, schedule, t)?;
    Ok(x.iter().zip(output).map(|(xi, oi)| c * (xi + k * oi)).collect())
}

/// Tape version of [`to_vector_field`].
pub fn to_vector_field_tape<'t>(
    param: Parameterization,
    output: Var<'t>,
    x: Var<'t>,
    schedule: &PathSchedule,
    t: f64,
) -> Result<Var<'t>, ObjectiveError> {
    if param == Parameterization::VectorField {
        return Ok(output);
    }
    schedule.check_time(t)?;
    let (c, k) = vp_conversion(param, schedule, t)?;
    Ok(x.add(&output.scale(k))?.scale(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FiniteDataset;
    use crate::rng::substream;

    fn single_point(x1: &[f64]) -> FiniteDataset {
        FiniteDataset::new(vec![x1.to_vec()]).unwrap()
    }

    fn conditional_model(schedule: PathSchedule, x1: Vec<f64>) -> impl FieldModel {
        FnModel::new(x1.len(), Parameterization::VectorField, move |t: &[f64], x: &Tensor| {
            let data = (0..t.len())
                .flat_map(|r| schedule.conditional_vf(t[r], x.row(r), &x1).unwrap())
                .collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        })
    }

    fn zero_model(d: usize, p: Parameterization) -> impl FieldModel {
        FnModel::new(d, p, |_: &[f64], x: &Tensor| Tensor::zeros(x.shape()))
    }

    #[test]
    fn conditional_model_has_zero_cfm_loss() {
        let x1 = vec![0.7, -1.2];
        for s in [PathSchedule::ot(), PathSchedule::vp(), PathSchedule::ve()] {
            let mut rng = substream(1, "cfm-zero");
            let batch = LossBatch::draw(&single_point(&x1), &s, 64, &mut rng, TimeSampling::Uniform).unwrap();
            let m = conditional_model(s, x1.clone());
            let tape = Tape::new();
            let out = cfm_loss(&BoundModel::new(&m, &tape), &s, &batch).unwrap();
            assert!(out.value() < 1e-16, "{} {}", s.name(), out.value());
        }
    }

    #[test]
    fn zero_model_loss_equals_noise_second_moment() {
        // OT with σ_min = 0 on {0}: target is −x₀.
        let s = PathSchedule::ot_with(0.0);
        let mut rng = substream(2, "cfm-moment");
        let n = 100_000;
        let batch = LossBatch::draw(&single_point(&[0.0, 0.0]), &s, n, &mut rng, TimeSampling::Uniform).unwrap();
        let m = zero_model(2, Parameterization::VectorField);
        let tape = Tape::new();
        let out = cfm_loss(&BoundModel::new(&m, &tape), &s, &batch).unwrap();
        assert!((out.value() - batch.x0.sum_squares() / n as f64).abs() < 1e-12);
        // ‖x₀‖² ~ χ²₂ has variance 4.
        let band = 3.0 * (4.0 / n as f64).sqrt();
        assert!((out.value() - 2.0).abs() < band, "{}", out.value());
    }

    #[test]
    fn reparameterized_and_explicit_forms_agree() {
        let pts = FiniteDataset::new(vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.0, -1.0]]).unwrap();
        let m = crate::model::Mlp::init(crate::model::ModelConfig::desk(2), 3).unwrap();
        let mut m = m;
        let n = m.params_mut().len();
        let mut rng = substream(3, "out-layer");
        for p in &mut m.params_mut()[n - 2..] {
            for v in p.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        for s in [PathSchedule::ot(), PathSchedule::vp(), PathSchedule::ve()] {
            let batch = LossBatch::draw(&pts, &s, 128, &mut rng, TimeSampling::Uniform).unwrap();
            let tape = Tape::new();
            let bound = BoundModel::new(&m, &tape);
            let a = cfm_loss(&bound, &s, &batch).unwrap().value();
            let (xt, _) = batch.noisy_points(&s).unwrap();
            let b = cfm_loss_conditional(&bound, &s, &batch.t, &xt, &batch.x1)
                .unwrap()
                .value();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}: {a} vs {b}", s.name());
        }
    }

    #[test]
    fn ot_target_is_exact() {
        let s = PathSchedule::ot_with(0.1);
        let batch = LossBatch::new(
            vec![0.3],
            Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(),
        )
        .unwrap();
        let m = zero_model(2, Parameterization::VectorField);
        let tape = Tape::new();
        let out = cfm_loss(&BoundModel::new(&m, &tape), &s, &batch).unwrap();
        let target: [f64; 2] = [1.0 - 0.9 * 0.5, 2.0 + 0.9 * 1.0];
        assert_eq!(out.per_sample[0], target[0] * target[0] + target[1] * target[1]);
    }

    #[test]
    fn score_and_noise_losses_vanish_at_their_targets() {
        let x1 = vec![0.4, -0.8];
        let s = PathSchedule::vp();
        let mut rng = substream(4, "score-zero");
        let batch = LossBatch::draw(&single_point(&x1), &s, 64, &mut rng, TimeSampling::Uniform).unwrap();
        let xs = x1.clone();
        let score = FnModel::new(2, Parameterization::Score, move |t: &[f64], x: &Tensor| {
            let data = (0..t.len())
                .flat_map(|r| s.conditional_score(t[r], x.row(r), &xs).unwrap())
                .collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        });
        let xs = x1.clone();
        let noise = FnModel::new(2, Parameterization::Noise, move |t: &[f64], x: &Tensor| {
            let data = (0..t.len())
                .flat_map(|r| {
                    let c = s.coefficients(t[r]).unwrap();
                    x.row(r)
                        .iter()
                        .zip(&xs)
                        .map(|(xi, yi)| (xi - c.a * yi) / c.sigma)
                        .collect::<Vec<_>>()
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        });
        let tape = Tape::new();
        for v in [
            sm_loss(&BoundModel::new(&score, &tape), &s, &batch).unwrap().value(),
            scoreflow_loss(&BoundModel::new(&score, &tape), &s, &batch).unwrap().value(),
            ddpm_loss(&BoundModel::new(&noise, &tape), &s, &batch).unwrap().value(),
        ] {
            assert!(v < 1e-18, "{v}");
        }
    }

    #[test]
    fn zero_score_and_noise_models_give_dimension() {
        let s = PathSchedule::vp();
        let n = 100_000;
        let mut rng = substream(5, "sm-moment");
        let batch = LossBatch::draw(&single_point(&[0.3, 0.3]), &s, n, &mut rng, TimeSampling::Uniform).unwrap();
        let band = 3.0 * (4.0 / n as f64).sqrt();
        let tape = Tape::new();
        let sm = sm_loss(&BoundModel::new(&zero_model(2, Parameterization::Score), &tape), &s, &batch)
            .unwrap()
            .value();
        let dd = ddpm_loss(&BoundModel::new(&zero_model(2, Parameterization::Noise), &tape), &s, &batch)
            .unwrap()
            .value();
        // Both reduce to the sample mean of ‖x₀‖².
        assert!((sm - dd).abs() < 1e-10);
        assert!((sm - 2.0).abs() < band, "{sm}");
    }

    #[test]
    fn scoreflow_weight_at_time_zero_is_beta_max() {
        let s = PathSchedule::vp();
        let batch = LossBatch::new(
            vec![0.0],
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let tape = Tape::new();
        let m = zero_model(1, Parameterization::Score);
        let out = scoreflow_loss(&BoundModel::new(&m, &tape), &s, &batch).unwrap();
        let sigma = s.coefficients(0.0).unwrap().sigma;
        assert!((out.value() - 20.0 / (sigma * sigma)).abs() < 1e-12);
        assert!(scoreflow_loss(&BoundModel::new(&m, &tape), &PathSchedule::ve(), &batch).is_err());
    }

    #[test]
    fn wrong_parameterization_is_rejected() {
        let s = PathSchedule::vp();
        let batch = LossBatch::new(vec![0.5], Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])).unwrap();
        let tape = Tape::new();
        let vf = zero_model(2, Parameterization::VectorField);
        let b = BoundModel::new(&vf, &tape);
        assert!(matches!(sm_loss(&b, &s, &batch), Err(ObjectiveError::Parameterization { .. })));
        assert!(matches!(ddpm_loss(&b, &s, &batch), Err(ObjectiveError::Parameterization { .. })));
        let sc = zero_model(2, Parameterization::Score);
        assert!(cfm_loss(&BoundModel::new(&sc, &tape), &s, &batch).is_err());
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let pts = FiniteDataset::new(vec![vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap();
        let s = PathSchedule::ot();
        let mut rng = substream(6, "perm");
        let batch = LossBatch::draw(&pts, &s, 16, &mut rng, TimeSampling::Uniform).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let pick = |m: &Tensor| {
            Tensor::new(vec![16, 2], perm.iter().flat_map(|&i| m.row(i).to_vec()).collect()).unwrap()
        };
        let permuted = LossBatch::new(
            perm.iter().map(|&i| batch.t[i]).collect(),
            pick(&batch.x1),
            pick(&batch.x0),
        )
        .unwrap();
        let m = zero_model(2, Parameterization::VectorField);
        let tape = Tape::new();
        let a = cfm_loss(&BoundModel::new(&m, &tape), &s, &batch).unwrap().value();
        let b = cfm_loss(&BoundModel::new(&m, &tape), &s, &permuted).unwrap().value();
        assert!((a - b).abs() <= 1e-14 * a);
    }

    #[test]
    fn stratified_times_cover_the_interval() {
        let pts = FiniteDataset::new(vec![vec![0.0]]).unwrap();
        let s = PathSchedule::vp();
        let mut rng = substream(7, "strat");
        let b = LossBatch::draw(&pts, &s, 10, &mut rng, TimeSampling::Stratified).unwrap();
        for k in 0..5 {
            assert!((b.t[2 * k] + b.t[2 * k + 1] - s.t_max()).abs() < 1e-15);
            let lo = s.t_max() * k as f64 / 5.0;
            let hi = s.t_max() * (k + 1) as f64 / 5.0;
            assert!(b.t[2 * k] >= lo && b.t[2 * k] <= hi);
        }
    }

    #[test]
    fn score_conversion_reproduces_conditional_field() {
        let s = PathSchedule::vp();
        let mut rng = substream(8, "convert");
        for _ in 0..500 {
            let t = rng.random_range(0.0..s.t_max());
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x1: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let score = s.conditional_score(t, &x, &x1).unwrap();
            let u = to_vector_field(Parameterization::Score, &score, &s, t, &x).unwrap();
            let exact = s.closed_form_vf(t, &x, &x1).unwrap();
            assert!(crate::paths::relative_error(&u, &exact) <= 1e-8);
            let c = s.coefficients(t).unwrap();
            let eps: Vec<f64> = x.iter().zip(&x1).map(|(xi, yi)| (xi - c.a * yi) / c.sigma).collect();
            let u2 = to_vector_field(Parameterization::Noise, &eps, &s, t, &x).unwrap();
            assert!(crate::paths::relative_error(&u2, &exact) <= 1e-8);
        }
    }

    #[test]
    fn zero_noise_converts_to_linear_field() {
        let s = PathSchedule::vp();
        let t = 0.35;
        let x = [0.5, -2.0];
        let u = to_vector_field(Parameterization::Noise, &[0.0, 0.0], &s, t, &x).unwrap();
        let c = 0.5 * s.beta(1.0 - t).unwrap();
        assert_eq!(u, vec![c * 0.5, c * -2.0]);
        assert_eq!(noise_to_score(&[0.3, -1.5], 1.0), vec![-0.3, 1.5]);
        let tape = Tape::new();
        let out = tape.constant(Tensor::vector(vec![0.25, 1.0]));
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let taped = to_vector_field_tape(Parameterization::Score, out, xv, &s, t).unwrap();
        let plain = to_vector_field(Parameterization::Score, &[0.25, 1.0], &s, t, &x).unwrap();
        assert_eq!(taped.value().data(), plain.as_slice());
        assert!(to_vector_field(Parameterization::Score, &[0.0], &PathSchedule::ot(), 0.5, &[0.0]).is_err());
    }
}
