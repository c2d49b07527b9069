//! Explicit Runge–Kutta integrators on a flat state vector.

use serde::{Deserialize, Serialize};

use super::OdeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "euler" => Some(Method::Euler),
            "midpoint" => Some(Method::Midpoint),
            "rk4" => Some(Method::Rk4),
            "dopri5" => Some(Method::Dopri5),
            _ => None,
        }
    }

    /// Field evaluations per step of a fixed-step method.
    pub fn stages(&self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
            Method::Dopri5 => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverCfg {
    pub method: Method,
    /// Step count for the fixed-step methods.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub atol: f64,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_max_nfe")]
    pub max_nfe: usize,
}

fn default_steps() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-5
}

fn default_max_nfe() -> usize {
    100_000
}

impl SolverCfg {
    pub fn fixed(method: Method, steps: usize) -> Self {
        Self {
            method,
            steps,
            atol: default_tol(),
            rtol: default_tol(),
            max_nfe: default_max_nfe(),
        }
    }

    pub fn dopri5(atol: f64, rtol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            steps: default_steps(),
            atol,
            rtol,
            max_nfe: default_max_nfe(),
        }
    }

    /// Fixed-step method whose total evaluation count is `nfe`.
    pub fn with_nfe(method: Method, nfe: usize) -> Result<Self, OdeError> {
        let stages = method.stages();
        if method == Method::Dopri5 || nfe == 0 || nfe % stages != 0 {
            return Err(OdeError::Config(format!(
                "NFE {nfe} is not a positive multiple of {} for {}",
                stages,
                method.name()
            )));
        }
        Ok(Self::fixed(method, nfe / stages))
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if self.steps == 0 {
            return Err(OdeError::Config("steps must be at least 1".into()));
        }
        if !(self.atol > 0.0) || !(self.rtol > 0.0) {
            return Err(OdeError::Config("atol and rtol must be positive".into()));
        }
        if self.max_nfe == 0 {
            return Err(OdeError::Config("max_nfe must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SolverCfg {
    fn default() -> Self {
        Self::dopri5(default_tol(), default_tol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Completed,
    /// Stopped early at `t_reached`; the state is the last accepted one.
    MaxNfeExceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub y: Vec<f64>,
    pub t_reached: f64,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub status: SolveStatus,
    /// States at the requested output times that were reached.
    pub trajectory: Vec<(f64, Vec<f64>)>,
    /// Accepted step sizes in order.
    pub step_sizes: Vec<f64>,
}

/// Right-hand side `dy/dt = f(t, y)` written into the output slice.
pub trait Rhs {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), OdeError>;
}

impl<F> Rhs for F
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), OdeError> {
        self(t, y, dy)
    }
}

struct Counted<'a, R: Rhs + ?Sized> {
    inner: &'a mut R,
    nfe: usize,
}

impl<R: Rhs + ?Sized> Counted<'_, R> {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), OdeError> {
        self.nfe += 1;
        self.inner.eval(t, y, dy)?;
        if dy.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { t });
        }
        Ok(())
    }
}

fn axpy(out: &mut [f64], y: &[f64], terms: &[(f64, &[f64])]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = y[i];
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o = acc;
    }
}

fn validate_outputs(span: (f64, f64), outputs: &[f64]) -> Result<(), OdeError> {
    let (t0, t1) = span;
    if !(t0.is_finite() && t1.is_finite()) || t1 < t0 {
        return Err(OdeError::Config(format!("invalid span [{t0}, {t1}]")));
    }
    if outputs.windows(2).any(|w| w[1] < w[0]) || outputs.iter().any(|&t| t < t0 || t > t1) {
        return Err(OdeError::Config("output times must be sorted and inside the span".into()));
    }
    Ok(())
}

/// Integrates `dy/dt = f(t, y)` from `span.0` to `span.1`.
///
/// `outputs` lists times (sorted, inside the span) at which the state is
/// recorded: by cubic Hermite interpolation for dopri5 and by linear
/// interpolation between steps for the fixed-step methods.
pub fn integrate<R: Rhs + ?Sized>(
    f: &mut R,
    y0: &[f64],
    span: (f64, f64),
    cfg: &SolverCfg,
    outputs: &[f64],
) -> Result<SolveReport, OdeError> {
    cfg.validate()?;
    validate_outputs(span, outputs)?;
    let mut counted = Counted { inner: f, nfe: 0 };
    match cfg.method {
        Method::Dopri5 => dopri5(&mut counted, y0, span, cfg, outputs),
        m => fixed_step(&mut counted, m, y0, span, cfg, outputs),
    }
}

/// Integrates from `span.1` down to `span.0` by substituting `s = span.1 − t`
/// and solving `dy/ds = −f(span.1 − s, y)` forward in `s`.
pub fn integrate_reverse<R: Rhs + ?Sized>(
    f: &mut R,
    y_end: &[f64],
    span: (f64, f64),
    cfg: &SolverCfg,
) -> Result<SolveReport, OdeError> {
    let (t0, t1) = span;
    let mut g = |s: f64, y: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
        f.eval(t1 - s, y, dy)?;
        dy.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    };
    let mut rep = integrate(&mut g, y_end, (0.0, t1 - t0), cfg, &[])?;
    rep.t_reached = t1 - rep.t_reached;
    Ok(rep)
}

fn fixed_step<R: Rhs + ?Sized>(
    f: &mut Counted<'_, R>,
    method: Method,
    y0: &[f64],
    (t0, t1): (f64, f64),
    cfg: &SolverCfg,
    outputs: &[f64],
) -> Result<SolveReport, OdeError> {
    let n = y0.len();
    let steps = cfg.steps;
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut next = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut trajectory = Vec::with_capacity(outputs.len());
    let mut out_idx = 0;
    while out_idx < outputs.len() && outputs[out_idx] <= t0 {
        trajectory.push((outputs[out_idx], y.clone()));
        out_idx += 1;
    }
    let mut report_steps = Vec::with_capacity(steps);
    for i in 0..steps {
        if f.nfe + method.stages() > cfg.max_nfe {
            let t = t0 + i as f64 * h;
            return Ok(SolveReport {
                y,
                t_reached: t,
                nfe: f.nfe,
                accepted: i,
                rejected: 0,
                status: SolveStatus::MaxNfeExceeded,
                trajectory,
                step_sizes: report_steps,
            });
        }
        let t = t0 + i as f64 * h;
        let t_next = if i + 1 == steps { t1 } else { t0 + (i + 1) as f64 * h };
        match method {
            Method::Euler => {
                f.eval(t, &y, &mut k1)?;
                axpy(&mut next, &y, &[(h, &k1)]);
            }
            Method::Midpoint => {
                f.eval(t, &y, &mut k1)?;
                axpy(&mut tmp, &y, &[(0.5 * h, &k1)]);
                f.eval(t + 0.5 * h, &tmp, &mut k2)?;
                axpy(&mut next, &y, &[(h, &k2)]);
            }
            Method::Rk4 => {
                f.eval(t, &y, &mut k1)?;
                axpy(&mut tmp, &y, &[(0.5 * h, &k1)]);
                f.eval(t + 0.5 * h, &tmp, &mut k2)?;
                axpy(&mut tmp, &y, &[(0.5 * h, &k2)]);
                f.eval(t + 0.5 * h, &tmp, &mut k3)?;
                axpy(&mut tmp, &y, &[(h, &k3)]);
                f.eval(t + h, &tmp, &mut k4)?;
                axpy(
                    &mut next,
                    &y,
                    &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)],
                );
            }
            Method::Dopri5 => unreachable!("adaptive method"),
        }
        while out_idx < outputs.len() && outputs[out_idx] <= t_next {
            let theta = if t_next > t { (outputs[out_idx] - t) / (t_next - t) } else { 1.0 };
            let point = y.iter().zip(&next).map(|(a, b)| a + theta * (b - a)).collect();
            trajectory.push((outputs[out_idx], point));
            out_idx += 1;
        }
        std::mem::swap(&mut y, &mut next);
        report_steps.push(t_next - t);
    }
    Ok(SolveReport {
        y,
        t_reached: t1,
        nfe: f.nfe,
        accepted: steps,
        rejected: 0,
        status: SolveStatus::Completed,
        trajectory,
        step_sizes: report_steps,
    })
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
// PI controller exponents (Hairer & Wanner, II.4).
const ALPHA: f64 = 0.2 - 0.04 * 0.75;
const BETA: f64 = 0.04;

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt()
}

fn hermite(y0: &[f64], f0: &[f64], y1: &[f64], f1: &[f64], h: f64, theta: f64) -> Vec<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
        .collect()
}

fn dopri5<R: Rhs + ?Sized>(
    f: &mut Counted<'_, R>,
    y0: &[f64],
    (t0, t1): (f64, f64),
    cfg: &SolverCfg,
    outputs: &[f64],
) -> Result<SolveReport, OdeError> {
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut trajectory = Vec::with_capacity(outputs.len());
    let mut out_idx = 0;
    while out_idx < outputs.len() && outputs[out_idx] <= t0 {
        trajectory.push((outputs[out_idx], y.clone()));
        out_idx += 1;
    }
    let mut report = SolveReport {
        y: Vec::new(),
        t_reached: t0,
        nfe: 0,
        accepted: 0,
        rejected: 0,
        status: SolveStatus::Completed,
        trajectory: Vec::new(),
        step_sizes: Vec::new(),
    };
    if t1 == t0 || n == 0 {
        report.y = y;
        report.t_reached = t1;
        report.trajectory = trajectory;
        return Ok(report);
    }

    let mut k1 = vec![0.0; n];
    let (mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut k5, mut k6, mut k7) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    f.eval(t0, &y, &mut k1)?;

    // Initial step from the scaled sizes of y₀ and f(t₀, y₀).
    let scale0: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let d0 = rms(y.iter().zip(&scale0).map(|(v, s)| v / s), n);
    let d1 = rms(k1.iter().zip(&scale0).map(|(v, s)| v / s), n);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(t1 - t0);

    let mut t = t0;
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;
    while t < t1 {
        if f.nfe + 6 > cfg.max_nfe {
            report.status = SolveStatus::MaxNfeExceeded;
            break;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t, h });
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        axpy(&mut tmp, &y, &[(h * A21, &k1)]);
        f.eval(t + C2 * h, &tmp, &mut k2)?;
        axpy(&mut tmp, &y, &[(h * A31, &k1), (h * A32, &k2)]);
        f.eval(t + C3 * h, &tmp, &mut k3)?;
        axpy(&mut tmp, &y, &[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)]);
        f.eval(t + C4 * h, &tmp, &mut k4)?;
        axpy(
            &mut tmp,
            &y,
            &[(h * A51, &k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)],
        );
        f.eval(t + C5 * h, &tmp, &mut k5)?;
        axpy(
            &mut tmp,
            &y,
            &[(h * A61, &k1), (h * A62, &k2), (h * A63, &k3), (h * A64, &k4), (h * A65, &k5)],
        );
        let t_next = if last { t1 } else { t + h };
        f.eval(t_next, &tmp, &mut k6)?;
        axpy(
            &mut y_new,
            &y,
            &[(h * B1, &k1), (h * B3, &k3), (h * B4, &k4), (h * B5, &k5), (h * B6, &k6)],
        );
        f.eval(t_next, &y_new, &mut k7)?;

        let err = rms(
            (0..n).map(|i| {
                let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                e / (cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs()))
            }),
            n,
        );
        if !err.is_finite() {
            return Err(OdeError::NonFinite { t });
        }
        if err <= 1.0 {
            while out_idx < outputs.len() && outputs[out_idx] <= t_next {
                let theta = (outputs[out_idx] - t) / h;
                trajectory.push((outputs[out_idx], hermite(&y, &k1, &y_new, &k7, h, theta)));
                out_idx += 1;
            }
            report.step_sizes.push(h);
            report.accepted += 1;
            t = t_next;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            let err_c = err.max(1e-10);
            let mut fac = SAFETY * err_c.powf(-ALPHA) * err_prev.powf(BETA);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            err_prev = err.max(1e-4);
            last_rejected = false;
        } else {
            report.rejected += 1;
            h *= (SAFETY * err.powf(-ALPHA)).max(FAC_MIN);
            last_rejected = true;
        }
    }
    report.y = y;
    report.t_reached = t;
    report.nfe = f.nfe;
    report.trajectory = trajectory;
    Ok(report)
}
