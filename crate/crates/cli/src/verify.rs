//! Self-check suite behind `flowmatch verify`.
//!
//! Every check measures one number against a tolerance interval and records
//! its wall time. The JSON report has the shape
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "mutation": null,
//!   "checks": [
//!     { "name": "conditional_flow_fd", "criterion": 1, "measured": 3.1e-9,
//!       "tolerance": { "max": 1e-6 }, "seconds": 0.2, "time_limit_secs": 5.0,
//!       "passed": true }
//!   ],
//!   "passed": true,
//!   "seconds": 41.7
//! }
//! ```
//!
//! `measured` is `null` when the computation itself failed; `note` then
//! carries the error. The check names are fixed by [`MANIFEST`].
//!
//! A mutation swaps a deliberately broken component into the fields under
//! test, so a pristine build passes and each mutation fails somewhere.

use std::time::Instant;

use clap::ValueEnum;
use flowmatch::autodiff::Tensor;
use flowmatch::data::QuantizedMixture;
use flowmatch::model::{Mlp, ModelConfig};
use flowmatch::objectives::{cfm_loss_quadrature, fm_loss_exact, Quadrature};
use flowmatch::ode::{
    bpd, integrate, integrate_reverse, log_likelihood, log_likelihood_batch, solve_batch, BatchField,
    ConditionalField, DivergenceMode, LikelihoodCfg, Method, MixtureDensity, OdeError, ProbeKind,
    SolverCfg, UniformCube,
};
use flowmatch::oracle::{continuity_residual, DensityField, GridSpec, MixtureOracle, Reversed};
use flowmatch::paths::{relative_error, PathSchedule};
use flowmatch::rng::{standard_normal, substream};
use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Check names in report order.
pub const MANIFEST: &[&str] = &[
    "conditional_flow_fd",
    "closed_form_vf_dual",
    "probability_flow_vf",
    "continuity_ot_mixtures",
    "continuity_vp_mixtures",
    "continuity_second_order",
    "cfm_fm_offset_spread",
    "cfm_fm_gradient_agreement",
    "continuity_reversed",
    "likelihood_single_point_ot",
    "likelihood_hutchinson",
    "bpd_uniform",
    "bpd_k_monotone",
    "ot_one_step_euler",
    "euler_order",
    "midpoint_order",
    "rk4_order",
    "dopri5_exponential",
    "nfe_accounting",
    "round_trip",
    "exact_likelihood_probe_invariance",
    "likelihood_tolerance_monotone",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Negates the closed-form OT conditional field.
    SignFlipOt,
    /// Adds a constant drift to every field under test.
    ConstantDrift,
    /// Negates the divergence seen by the likelihood solver.
    NegatedDivergence,
}

const DRIFT: [f64; 2] = [0.5, 0.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Tolerance {
    pub fn at_most(max: f64) -> Self {
        Self { min: None, max: Some(max) }
    }

    pub fn between(min: f64, max: f64) -> Self {
        Self { min: Some(min), max: Some(max) }
    }

    pub fn admits(&self, v: f64) -> bool {
        v.is_finite() && self.min.map_or(true, |m| v >= m) && self.max.map_or(true, |m| v <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub criterion: Option<u32>,
    pub measured: Option<f64>,
    pub tolerance: Tolerance,
    pub seconds: f64,
    pub time_limit_secs: Option<f64>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub mutation: Option<Mutation>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub seconds: f64,
}

impl Report {
    pub fn names(&self) -> Vec<&str> {
        self.checks.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Measure = Result<f64, String>;

struct Suite {
    mutation: Option<Mutation>,
    checks: Vec<Check>,
}

impl Suite {
    fn run(
        &mut self,
        name: &str,
        criterion: Option<u32>,
        tolerance: Tolerance,
        time_limit_secs: Option<f64>,
        f: impl FnOnce(Option<Mutation>) -> Measure,
    ) {
        let start = Instant::now();
        let result = f(self.mutation);
        let seconds = start.elapsed().as_secs_f64();
        let (measured, note) = match result {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e)),
        };
        let in_time = time_limit_secs.map_or(true, |lim| seconds <= lim);
        let passed = measured.is_some_and(|v| tolerance.admits(v)) && in_time;
        let note = match (note, in_time) {
            (Some(n), _) => Some(n),
            (None, false) => Some(format!("took {seconds:.1}s")),
            (None, true) => None,
        };
        self.checks.push(Check {
            name: name.into(),
            criterion,
            measured,
            tolerance,
            seconds,
            time_limit_secs,
            passed,
            note,
        });
    }
}

/// Runs every check in [`MANIFEST`] order. Check groups can be selected by
/// criterion number; `None` runs all of them.
pub fn run(mutation: Option<Mutation>, only: Option<&[u32]>) -> Report {
    let start = Instant::now();
    let mut s = Suite {
        mutation,
        checks: Vec::new(),
    };
    let want = |c: u32| only.map_or(true, |o| o.contains(&c));
    if want(1) {
        s.run("conditional_flow_fd", Some(1), Tolerance::at_most(1e-6), Some(5.0), conditional_flow_fd);
    }
    if want(2) {
        s.run("closed_form_vf_dual", Some(2), Tolerance::at_most(1e-12), Some(5.0), closed_form_dual);
        s.run("probability_flow_vf", Some(2), Tolerance::at_most(1e-8), Some(5.0), probability_flow);
    }
    if want(3) {
        let lim = Some(60.0);
        s.run("continuity_ot_mixtures", Some(3), Tolerance::at_most(1e-3), lim, |m| {
            continuity_mixtures(m, PathSchedule::ot(), 0.1, false)
        });
        s.run("continuity_vp_mixtures", Some(3), Tolerance::at_most(1e-3), lim, |m| {
            continuity_mixtures(m, PathSchedule::vp(), 0.5, false)
        });
        s.run("continuity_second_order", Some(3), Tolerance::between(2.5, 6.0), lim, continuity_order);
    }
    if want(4) {
        let lim = Some(120.0);
        let mut grads = None;
        s.run("cfm_fm_offset_spread", Some(4), Tolerance::at_most(1e-6), lim, |_| {
            let (spread, grad) = cfm_fm(&QUAD_POINTS)?;
            grads = Some(grad);
            Ok(spread)
        });
        s.run("cfm_fm_gradient_agreement", Some(4), Tolerance::at_most(1e-5), None, |_| {
            grads.ok_or_else(|| "quadrature failed".to_string())
        });
    }
    if want(5) {
        s.run("continuity_reversed", Some(5), Tolerance::at_most(1e-3), Some(60.0), |m| {
            let ot = continuity_mixtures(m, PathSchedule::ot(), 0.9, true)?;
            let vp = continuity_mixtures(m, PathSchedule::vp(), 0.5, true)?;
            Ok(ot.max(vp))
        });
    }
    if want(6) {
        s.run("likelihood_single_point_ot", Some(6), Tolerance::at_most(1e-3), Some(30.0), single_point_likelihood);
        s.run("likelihood_hutchinson", Some(6), Tolerance::at_most(3.0), Some(30.0), hutchinson_likelihood);
    }
    if want(7) {
        s.run("bpd_uniform", Some(7), Tolerance::at_most(1e-6), None, |_| bpd_uniform());
        let ks = [1, 5, 15];
        let mut table = None;
        s.run("bpd_k_monotone", Some(7), Tolerance::at_most(0.0), None, |_| {
            let means = bpd_k_sweep(&ks, 100, 16)?;
            table = Some(means.clone());
            Ok(k_sweep_violation(&means))
        });
        if let (Some(means), Some(check)) = (table, s.checks.last_mut()) {
            let cells: Vec<String> = ks.iter().zip(&means).map(|(k, m)| format!("K={k}: {m:.4}")).collect();
            check.note.get_or_insert_with(|| format!("mean bpd {}", cells.join(", ")));
        }
    }
    if want(8) {
        s.run("ot_one_step_euler", Some(8), Tolerance::at_most(1e-12), None, one_step_euler);
    }
    if want(10) {
        for (name, method, order) in [
            ("euler_order", Method::Euler, 1.0),
            ("midpoint_order", Method::Midpoint, 2.0),
            ("rk4_order", Method::Rk4, 4.0),
        ] {
            s.run(name, Some(10), Tolerance::between(order - 0.2, order + 0.2), None, |_| {
                observed_order(method)
            });
        }
        s.run("dopri5_exponential", Some(10), Tolerance::at_most(1e-5), None, |_| {
            let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::dopri5(1e-5, 1e-5), &[])
                .map_err(|e| e.to_string())?;
            Ok((rep.y[0] - std::f64::consts::E).abs())
        });
    }
    if only.is_none() {
        s.run("nfe_accounting", None, Tolerance::at_most(0.0), None, |_| nfe_accounting());
        s.run("round_trip", None, Tolerance::at_most(1e-5), None, round_trip);
        s.run("exact_likelihood_probe_invariance", None, Tolerance::at_most(1e-6), None, probe_invariance);
        s.run("likelihood_tolerance_monotone", None, Tolerance::at_most(0.0), None, tolerance_monotone);
    }
    let passed = s.checks.iter().all(|c| c.passed);
    Report {
        schema_version: REPORT_SCHEMA_VERSION,
        mutation,
        checks: s.checks,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn schedules() -> [PathSchedule; 3] {
    [PathSchedule::ot(), PathSchedule::vp(), PathSchedule::ve()]
}


/// Closed-form conditional field, with the sign flip applied when asked.
fn closed_form(
    m: Option<Mutation>,
    s: &PathSchedule,
    t: f64,
    x: &[f64],
    x1: &[f64],
) -> Result<Vec<f64>, String> {
    let mut u = s.closed_form_vf(t, x, x1).map_err(err)?;
    if m == Some(Mutation::SignFlipOt) && matches!(s, PathSchedule::Ot { .. }) {
        u.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(u)
}

fn conditional_flow_fd(_: Option<Mutation>) -> Measure {
    let mut rng = substream(1, "verify-fd");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for s in schedules() {
        for _ in 0..1000 {
            let t = rng.random_range(0.01..0.99);
            let x0 = standard_normal(&mut rng, 2);
            let x1 = standard_normal(&mut rng, 2);
            let plus = s.conditional_flow(t + h, &x0, &x1).map_err(err)?;
            let minus = s.conditional_flow(t - h, &x0, &x1).map_err(err)?;
            let fd: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
            let xt = s.conditional_flow(t, &x0, &x1).map_err(err)?;
            let u = s.conditional_vf(t, &xt, &x1).map_err(err)?;
            worst = worst.max(relative_error(&fd, &u));
        }
    }
    Ok(worst)
}

fn closed_form_dual(m: Option<Mutation>) -> Measure {
    let mut rng = substream(2, "verify-dual");
    let mut worst = 0.0f64;
    for s in schedules() {
        for _ in 0..1000 {
            let t = rng.random_range(0.0..s.t_max());
            let x = standard_normal(&mut rng, 2);
            let x1 = standard_normal(&mut rng, 2);
            let general = s.conditional_vf(t, &x, &x1).map_err(err)?;
            let closed = closed_form(m, &s, t, &x, &x1)?;
            worst = worst.max(relative_error(&closed, &general));
        }
    }
    Ok(worst)
}

fn random_points(rng: &mut Pcg64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn probability_flow(_: Option<Mutation>) -> Measure {
    let mut rng = substream(3, "verify-pf");
    let mut worst = 0.0f64;
    for s in [PathSchedule::vp(), PathSchedule::ve()] {
        let o = MixtureOracle::uniform(random_points(&mut rng, 4), s).map_err(err)?;
        for _ in 0..1000 {
            let t = rng.random_range(0.0..s.t_max());
            let x = standard_normal(&mut rng, 2);
            let pf = o.probability_flow_vf(t, &x).map_err(err)?;
            let u = o.marginal_vf(t, &x).map_err(err)?;
            worst = worst.max(relative_error(&pf, &u));
        }
    }
    Ok(worst)
}

/// Mixture density paired with the posterior average of closed-form
/// conditional fields.
struct ClosedFormMarginal {
    oracle: MixtureOracle,
    mutation: Option<Mutation>,
}

impl DensityField for ClosedFormMarginal {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn density(&self, t: f64, x: &[f64]) -> f64 {
        self.oracle.marginal_density(t, x).unwrap_or(f64::NAN)
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s = self.oracle.schedule();
        let Ok(w) = self.oracle.posterior(t, x) else {
            return vec![f64::NAN; x.len()];
        };
        let mut u = vec![0.0; x.len()];
        for (wi, x1) in w.iter().zip(self.oracle.points()) {
            match closed_form(self.mutation, s, t, x, x1) {
                Ok(c) => u.iter_mut().zip(c).for_each(|(a, b)| *a += wi * b),
                Err(_) => return vec![f64::NAN; x.len()],
            }
        }
        if self.mutation == Some(Mutation::ConstantDrift) {
            u.iter_mut().zip(DRIFT).for_each(|(a, b)| *a += b);
        }
        u
    }
}

fn mixtures(m: Option<Mutation>, schedule: PathSchedule) -> Result<Vec<ClosedFormMarginal>, String> {
    let mut rng = substream(4, "verify-mixtures");
    (1..=8)
        .map(|n| {
            Ok(ClosedFormMarginal {
                oracle: MixtureOracle::uniform(random_points(&mut rng, n), schedule).map_err(err)?,
                mutation: m,
            })
        })
        .collect()
}

fn residual<F: DensityField + Sync>(field: &F, grid: &GridSpec) -> Measure {
    let r = continuity_residual(field, grid).map_err(err)?;
    if r.max_residual.is_nan() {
        return Err("non-finite residual".into());
    }
    Ok(r.max_residual)
}

/// Largest max-residual over 1–8 point mixtures on a 129²×5 grid.
fn continuity_mixtures(m: Option<Mutation>, schedule: PathSchedule, t_center: f64, reversed: bool) -> Measure {
    let grid = GridSpec::cube(2, 3.0, 129, t_center, 1e-3, 5);
    let mut worst = 0.0f64;
    for f in mixtures(m, schedule)? {
        let r = if reversed {
            residual(&Reversed::new(&f), &grid)?
        } else {
            residual(&f, &grid)?
        };
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Residual ratio under one grid halving (65² to 129²), reported as the
/// ratio furthest from the ideal 4 over all OT and VP mixtures.
fn continuity_order(m: Option<Mutation>) -> Measure {
    let coarse = GridSpec::cube(2, 3.0, 65, 0.5, 1e-3, 5);
    let fine = coarse.refined();
    let mut worst = 4.0f64;
    for schedule in [PathSchedule::ot(), PathSchedule::vp()] {
        for f in mixtures(m, schedule)? {
            let ratio = residual(&f, &coarse)? / residual(&f, &fine)?;
            if (ratio / 4.0).ln().abs() > (worst / 4.0).ln().abs() || ratio.is_nan() {
                worst = ratio;
            }
        }
    }
    Ok(worst)
}

const QUAD_POINTS: [[f64; 2]; 4] = [[1.0, 1.0], [-1.0, 1.0], [0.0, -1.5], [1.5, -0.5]];

/// A 3×32 MLP with a random (non-zero) output layer.
pub fn random_mlp(seed: u64) -> Result<Mlp, String> {
    let cfg = ModelConfig {
        widths: vec![32, 32, 32],
        ..ModelConfig::desk(2)
    };
    let mut m = Mlp::init(cfg, seed).map_err(err)?;
    let mut rng = substream(seed, "verify-out");
    let n = m.params_mut().len();
    for p in &mut m.params_mut()[n - 2..] {
        for v in p.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(m)
}

/// Spread of `L_CFM − L_FM` over five parameter draws, and the largest
/// elementwise relative gradient difference.
fn cfm_fm(points: &[[f64; 2]]) -> Result<(f64, f64), String> {
    let oracle = MixtureOracle::uniform(points.iter().map(|p| p.to_vec()).collect(), PathSchedule::ot())
        .map_err(err)?;
    let quad = Quadrature::default();
    let mut offsets = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let m = random_mlp(100 + seed)?;
        let fm = fm_loss_exact(&m, &oracle, &quad).map_err(err)?;
        let cfm = cfm_loss_quadrature(&m, &oracle, &quad).map_err(err)?;
        if let Some(w) = fm.warning.or(cfm.warning) {
            return Err(w);
        }
        for (a, b) in fm.gradients.iter().zip(&cfm.gradients) {
            worst = worst.max(elementwise_relative(a, b));
        }
        offsets.push(cfm.value - fm.value);
    }
    let hi = offsets.iter().cloned().fold(f64::MIN, f64::max);
    let lo = offsets.iter().cloned().fold(f64::MAX, f64::min);
    Ok((hi - lo, worst))
}

fn elementwise_relative(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(1e-6))
        .fold(0.0, f64::max)
}

/// A field under test, with the drift and divergence mutations applied.
struct Mutated<F> {
    inner: F,
    mutation: Option<Mutation>,
}

impl<F: BatchField> BatchField for Mutated<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        let mut v = self.inner.velocity(t, x)?;
        if self.mutation == Some(Mutation::ConstantDrift) {
            let d = self.dim();
            v.iter_mut().enumerate().for_each(|(i, a)| *a += DRIFT[(i % d).min(1)]);
        }
        Ok(v)
    }

    fn velocity_vjps(
        &self,
        t: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        let (_, mut vjps) = self.inner.velocity_vjps(t, x, cotangents)?;
        if self.mutation == Some(Mutation::NegatedDivergence) {
            vjps.iter_mut().flatten().for_each(|v| *v = -*v);
        }
        Ok((self.velocity(t, x)?, vjps))
    }
}

const X1_STAR: [f64; 2] = [0.8, -0.4];

fn single_point_field(m: Option<Mutation>) -> Mutated<ConditionalField> {
    Mutated {
        inner: ConditionalField::new(PathSchedule::ot_with(0.1), X1_STAR.to_vec()),
        mutation: m,
    }
}

fn exact_cfg(tol: f64) -> LikelihoodCfg {
    LikelihoodCfg::new(SolverCfg::dopri5(tol, tol), DivergenceMode::Exact)
}

/// `|log p₁(x₁*) + log(2π·0.01)|` for the single-point OT flow.
fn single_point_likelihood(m: Option<Mutation>) -> Measure {
    let exact = -(2.0 * std::f64::consts::PI * 0.01).ln();
    let r = log_likelihood(&single_point_field(m), &X1_STAR, &exact_cfg(1e-5), &mut substream(0, "probes"))
        .map_err(err)?;
    Ok((r.logp - exact).abs())
}

/// Distance of the mean of 10³ single-probe estimates from the exact value,
/// in standard errors.
fn hutchinson_likelihood(m: Option<Mutation>) -> Measure {
    let field = single_point_field(m);
    let q = [0.5, 0.2];
    let exact = log_likelihood(&field, &q, &exact_cfg(1e-6), &mut substream(0, "probes"))
        .map_err(err)?
        .logp;
    let cfg = LikelihoodCfg::new(
        SolverCfg::dopri5(1e-6, 1e-6),
        DivergenceMode::Hutchinson {
            probes: 1,
            distribution: ProbeKind::Gaussian,
        },
    );
    let est = log_likelihood_batch(&field, &vec![q.to_vec(); 1000], &cfg, 6)
        .into_iter()
        .map(|r| r.map(|r| r.logp))
        .collect::<Result<Vec<f64>, OdeError>>()
        .map_err(err)?;
    let n = est.len() as f64;
    let mean = est.iter().sum::<f64>() / n;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err("estimates have no spread".into());
    }
    Ok((mean - exact).abs() / (var / n).sqrt())
}

fn bpd_uniform() -> Measure {
    let pixels: Vec<Vec<i64>> = (0..64).map(|i| vec![i * 4 % 256, 255 - i, 0, 128]).collect();
    let rep = bpd(&UniformCube { dim: 4 }, &pixels, 5, 0).map_err(err)?;
    Ok(rep.per_example.iter().map(|v| (v - 8.0).abs()).fold(0.0, f64::max))
}

/// The d = 4 quantized fixture: a narrow three-component mixture, used as
/// both data source and model.
pub fn k_sweep_fixture() -> QuantizedMixture {
    QuantizedMixture {
        std: 0.01,
        ..QuantizedMixture::default()
    }
}

/// Mean BPD per `K`, averaged over `seeds` runs of `n` fixture examples.
pub fn bpd_k_sweep(ks: &[usize], seeds: u64, n: usize) -> Result<Vec<f64>, String> {
    let mixture = k_sweep_fixture();
    let density = MixtureDensity {
        mixture: mixture.clone(),
        dim: 4,
    };
    let mut sums = vec![0.0; ks.len()];
    for seed in 0..seeds {
        let pixels: Vec<Vec<i64>> = mixture
            .sample(4, n, seed)
            .map_err(err)?
            .into_iter()
            .map(|r| r.into_iter().map(i64::from).collect())
            .collect();
        for (sum, &k) in sums.iter_mut().zip(ks) {
            *sum += bpd(&density, &pixels, k, seed).map_err(err)?.mean;
        }
    }
    Ok(sums.into_iter().map(|s| s / seeds as f64).collect())
}

/// Largest increase between consecutive means; non-positive when monotone.
pub fn k_sweep_violation(means: &[f64]) -> f64 {
    means.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max)
}

fn one_step_euler(m: Option<Mutation>) -> Measure {
    let mut rng = substream(8, "verify-euler");
    let s = PathSchedule::ot();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x1: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x0: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let field = Mutated {
            inner: ConditionalField::new(s, x1.clone()),
            mutation: m,
        };
        let rep = solve_batch(&field, &x0, (0.0, 1.0), &SolverCfg::fixed(Method::Euler, 1), &[]).map_err(err)?;
        let exact = s.conditional_flow(1.0, &x0, &x1).map_err(err)?;
        worst = rep.y.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

fn exp_rhs() -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError> {
    |_, y, dy| {
        dy.copy_from_slice(y);
        Ok(())
    }
}

/// Least-squares slope of log error against log step count on `y' = y`.
fn observed_order(method: Method) -> Measure {
    let steps = [8usize, 16, 32, 64];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n in &steps {
        let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::fixed(method, n), &[]).map_err(err)?;
        xs.push((n as f64).ln());
        ys.push((rep.y[0] - std::f64::consts::E).abs().ln());
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok(-slope)
}

/// Absolute mismatch in evaluation counts, summed over methods.
fn nfe_accounting() -> Measure {
    let mut off = 0usize;
    for (method, per_step) in [(Method::Euler, 1), (Method::Midpoint, 2), (Method::Rk4, 4)] {
        let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::fixed(method, 7), &[]).map_err(err)?;
        off += rep.nfe.abs_diff(7 * per_step);
    }
    let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 3.0), &SolverCfg::dopri5(1e-8, 1e-8), &[]).map_err(err)?;
    off += rep.nfe.abs_diff(6 * (rep.accepted + rep.rejected) + 1);
    Ok(off as f64)
}

/// Worst forward-then-reverse error; the tolerance is 10·atol.
fn round_trip(m: Option<Mutation>) -> Measure {
    let cfg = SolverCfg::dopri5(1e-6, 1e-6);
    let x0 = [0.4, 1.3];
    let mut worst = 0.0f64;
    let cases = [
        (ConditionalField::new(PathSchedule::ot_with(0.1), vec![0.5, -1.0]), (0.0, 1.0)),
        (ConditionalField::new(PathSchedule::vp(), vec![0.5, -1.0]), (0.0, 0.9)),
    ];
    for (inner, span) in cases {
        let field = Mutated { inner, mutation: m };
        let fwd = solve_batch(&field, &x0, span, &cfg, &[]).map_err(err)?;
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
            dy.copy_from_slice(&field.velocity(t, y)?);
            Ok(())
        };
        let back = integrate_reverse(&mut rhs, &fwd.y, span, &cfg).map_err(err)?;
        worst = back.y.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

fn probe_invariance(m: Option<Mutation>) -> Measure {
    let field = single_point_field(m);
    let a = log_likelihood(&field, &[0.1, 0.3], &exact_cfg(1e-5), &mut substream(1, "probes")).map_err(err)?;
    let b = log_likelihood(&field, &[0.1, 0.3], &exact_cfg(1e-5), &mut substream(2, "probes")).map_err(err)?;
    Ok((a.logp - b.logp).abs())
}

/// Largest increase in single-point NLL error as dopri5 tolerance tightens
/// from 1e-3 to 1e-7.
fn tolerance_monotone(m: Option<Mutation>) -> Measure {
    let exact = -(2.0 * std::f64::consts::PI * 0.01).ln();
    let field = single_point_field(m);
    let errs = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&tol| {
            log_likelihood(&field, &X1_STAR, &exact_cfg(tol), &mut substream(0, "probes"))
                .map(|r| (r.logp - exact).abs())
                .map_err(err)
        })
        .collect::<Result<Vec<f64>, String>>()?;
    Ok(errs.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max))
}
