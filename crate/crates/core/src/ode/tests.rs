use rand::Rng;

use super::*;
use crate::data::QuantizedMixture;
use crate::model::{Mlp, ModelConfig};
use crate::paths::PathSchedule;
use crate::rng::substream;

fn exp_rhs() -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError> {
    |_, y, dy| {
        dy.copy_from_slice(y);
        Ok(())
    }
}

#[test]
fn zero_field_leaves_state_and_counts_evaluations() {
    let y0 = [0.3, -1.2, 4.0];
    for (method, per_step) in [(Method::Euler, 1), (Method::Midpoint, 2), (Method::Rk4, 4)] {
        let cfg = SolverCfg::fixed(method, 7);
        let rep = solve_batch(&ZeroField { dim: 3 }, &y0, (0.0, 1.0), &cfg, &[]).unwrap();
        assert_eq!(rep.y, y0);
        assert_eq!(rep.nfe, 7 * per_step);
    }
    let rep = solve_batch(&ZeroField { dim: 3 }, &y0, (0.0, 1.0), &SolverCfg::default(), &[]).unwrap();
    assert_eq!(rep.y, y0);
    assert_eq!(rep.nfe, 6 * (rep.accepted + rep.rejected) + 1);
}

#[test]
fn dopri5_solves_the_exponential() {
    let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::dopri5(1e-5, 1e-5), &[]).unwrap();
    assert!((rep.y[0] - std::f64::consts::E).abs() <= 1e-5, "{}", rep.y[0]);
    assert_eq!(rep.nfe, 6 * (rep.accepted + rep.rejected) + 1);
    assert_eq!(rep.step_sizes.len(), rep.accepted);
    assert!((rep.step_sizes.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn fixed_step_convergence_orders() {
    for (method, order) in [(Method::Euler, 1.0), (Method::Midpoint, 2.0), (Method::Rk4, 4.0)] {
        let errs: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| {
                let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::fixed(method, n), &[]).unwrap();
                (rep.y[0] - std::f64::consts::E).abs()
            })
            .collect();
        // Least-squares slope of log error against log step count.
        let xs: Vec<f64> = [8f64, 16.0, 32.0, 64.0].iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 4.0;
        let my = ys.iter().sum::<f64>() / 4.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((-slope - order).abs() <= 0.2, "{method:?}: {}", -slope);
    }
}

#[test]
fn one_euler_step_follows_the_ot_conditional_flow() {
    let mut rng = substream(1, "euler-ot");
    for _ in 0..100 {
        let x1: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x0: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = PathSchedule::ot();
        let field = ConditionalField::new(s, x1.clone());
        let rep = solve_batch(&field, &x0, (0.0, 1.0), &SolverCfg::fixed(Method::Euler, 1), &[]).unwrap();
        let exact = s.conditional_flow(1.0, &x0, &x1).unwrap();
        for (a, b) in rep.y.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn dense_output_tracks_the_solution() {
    let outs: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::dopri5(1e-8, 1e-8), &outs).unwrap();
    assert_eq!(rep.trajectory.len(), outs.len());
    for (t, y) in &rep.trajectory {
        assert!((y[0] - t.exp()).abs() < 1e-6, "t={t}");
    }
    let fixed = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &SolverCfg::fixed(Method::Rk4, 10), &outs).unwrap();
    for (t, y) in &fixed.trajectory {
        assert!((y[0] - t.exp()).abs() < 1e-5);
    }
}

fn assert_round_trip<F: BatchField>(field: &F, x0: &[f64], span: (f64, f64)) {
    let cfg = SolverCfg::dopri5(1e-6, 1e-6);
    let fwd = solve_batch(field, x0, span, &cfg, &[]).unwrap();
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
        dy.copy_from_slice(&field.velocity(t, y)?);
        Ok(())
    };
    let back = integrate_reverse(&mut rhs, &fwd.y, span, &cfg).unwrap();
    for (a, b) in back.y.iter().zip(x0) {
        assert!((a - b).abs() <= 10.0 * 1e-6, "{a} vs {b}");
    }
    assert_eq!(back.t_reached, span.0);
}

#[test]
fn round_trip_returns_to_start() {
    // Spans stop short of strong contraction, which the reverse solve would
    // amplify by 1/σ.
    let x0 = [0.4, 1.3];
    assert_round_trip(&ConditionalField::new(PathSchedule::vp(), vec![0.5, -1.0]), &x0, (0.0, 0.9));
    assert_round_trip(&ConditionalField::new(PathSchedule::ot_with(0.1), vec![0.5, -1.0]), &x0, (0.0, 1.0));
    assert_round_trip(&LinearField::rotation(), &x0, (0.0, 1.0));
    let mut m = Mlp::init(ModelConfig::desk(2), 8).unwrap();
    let mut rng = substream(8, "out");
    let n = m.params_mut().len();
    for p in &mut m.params_mut()[n - 2..] {
        for v in p.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    assert_round_trip(&ModelField::new(&m, PathSchedule::ot()), &x0, (0.0, 1.0));
}

#[test]
fn nfe_cap_flags_partial_result() {
    let cfg = SolverCfg {
        max_nfe: 20,
        ..SolverCfg::dopri5(1e-10, 1e-10)
    };
    let rep = integrate(&mut exp_rhs(), &[1.0], (0.0, 1.0), &cfg, &[]).unwrap();
    assert_eq!(rep.status, SolveStatus::MaxNfeExceeded);
    assert!(rep.nfe <= 20);
    assert!(rep.t_reached < 1.0);
}

#[test]
fn step_underflow_is_an_error() {
    // Finite-time blow-up at t = 1.
    let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
        dy[0] = y[0] * y[0];
        Ok(())
    };
    let err = integrate(&mut rhs, &[1.0], (0.0, 2.0), &SolverCfg::dopri5(1e-8, 1e-8), &[]);
    assert!(matches!(err, Err(OdeError::StepUnderflow { .. }) | Err(OdeError::NonFinite { .. })));
}

#[test]
fn config_validation() {
    assert!(SolverCfg::fixed(Method::Euler, 0).validate().is_err());
    assert!(SolverCfg::dopri5(0.0, 1e-5).validate().is_err());
    assert_eq!(SolverCfg::with_nfe(Method::Midpoint, 8).unwrap().steps, 4);
    assert!(SolverCfg::with_nfe(Method::Midpoint, 5).is_err());
    assert!(integrate(&mut exp_rhs(), &[1.0], (1.0, 0.0), &SolverCfg::default(), &[]).is_err());
}

#[test]
fn exact_divergence_of_analytic_fields() {
    let a = LinearField::new(3, vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 4.0, 0.0, -2.5]).unwrap();
    let x = [0.1, 0.2, 0.3, -1.0, 2.0, 0.5];
    assert_eq!(divergence_exact(&a, 0.0, &x).unwrap(), vec![a.trace(); 2]);
    assert_eq!(divergence_exact(&LinearField::rotation(), 0.3, &[1.0, 2.0]).unwrap(), vec![0.0]);
    for &(smin, t) in &[(0.0, 0.0), (0.1, 0.4), (1e-5, 0.9)] {
        let f = ConditionalField::new(PathSchedule::ot_with(smin), vec![1.0, -1.0]);
        let div = divergence_exact(&f, t, &[0.3, 0.7]).unwrap()[0];
        let expected = -2.0 * (1.0 - smin) / (1.0 - (1.0 - smin) * t);
        assert!((div - expected).abs() < 1e-12 * expected.abs());
    }
}

#[test]
fn exhaustive_rademacher_probes_give_the_trace() {
    let a = LinearField::new(2, vec![1.5, -0.7, 2.0, 0.25]).unwrap();
    let probes = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
    let est = divergence_hutchinson(&a, 0.0, &[0.3, 0.4], &probes).unwrap()[0];
    assert!((est - a.trace()).abs() < 1e-15);
}

#[test]
fn gaussian_probe_is_unbiased() {
    let a = LinearField::new(2, vec![1.5, -0.7, 2.0, 0.25]).unwrap();
    let mut rng = substream(2, "gauss-probe");
    let n = 100_000;
    let probes = draw_probes(&mut rng, ProbeKind::Gaussian, n, 2);
    let (_, vjps) = a.velocity_vjps(0.0, &[0.0, 0.0], &probes).unwrap();
    let est: Vec<f64> = probes.iter().zip(&vjps).map(|(z, g)| z[0] * g[0] + z[1] * g[1]).collect();
    let mean = est.iter().sum::<f64>() / n as f64;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - a.trace()).abs() <= 3.0 * (var / n as f64).sqrt(), "{mean}");
}

#[test]
fn rademacher_variance_matches_formula() {
    let a = LinearField::new(3, vec![1.0, 0.5, -0.3, 0.5, 2.0, 0.8, -0.3, 0.8, -1.0]).unwrap();
    let mut rng = substream(3, "rad-var");
    let n_probes = 4;
    let draws = 20_000;
    let est: Vec<f64> = (0..draws)
        .map(|_| {
            let z = draw_probes(&mut rng, ProbeKind::Rademacher, n_probes, 3);
            divergence_hutchinson(&a, 0.0, &[0.0; 3], &z).unwrap()[0]
        })
        .collect();
    let mean = est.iter().sum::<f64>() / draws as f64;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let off: f64 = 2.0 * (0.5f64.powi(2) + 0.3f64.powi(2) + 0.8f64.powi(2)) * 2.0;
    let expected = off / n_probes as f64;
    assert!((var - expected).abs() < 0.05 * expected, "{var} vs {expected}");
}

#[test]
fn identity_flow_likelihood_is_the_prior() {
    let cfg = LikelihoodCfg::new(SolverCfg::default(), DivergenceMode::Exact);
    let x = [0.7, -1.1];
    let r = log_likelihood(&ZeroField { dim: 2 }, &x, &cfg, &mut substream(0, "p")).unwrap();
    assert!((r.logp - crate::paths::standard_normal_log_density(&x)).abs() < 1e-15);
}

fn single_point_cfg(tol: f64) -> LikelihoodCfg {
    LikelihoodCfg::new(SolverCfg::dopri5(tol, tol), DivergenceMode::Exact)
}

#[test]
fn single_point_ot_likelihood() {
    let x1 = vec![0.8, -0.4];
    let field = ConditionalField::new(PathSchedule::ot_with(0.1), x1.clone());
    let exact = -(2.0 * std::f64::consts::PI * 0.01).ln();
    let r = log_likelihood(&field, &x1, &single_point_cfg(1e-5), &mut substream(0, "p")).unwrap();
    assert!((r.logp - exact).abs() < 1e-3, "{}", r.logp);
    // The probe seed is irrelevant in exact mode.
    let r2 = log_likelihood(&field, &x1, &single_point_cfg(1e-5), &mut substream(99, "p")).unwrap();
    assert_eq!(r.logp, r2.logp);
    // Error shrinks as the tolerance tightens.
    let errs: Vec<f64> = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&tol| {
            let r = log_likelihood(&field, &x1, &single_point_cfg(tol), &mut substream(0, "p")).unwrap();
            (r.logp - exact).abs()
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
}

#[test]
fn hutchinson_likelihood_agrees_with_exact() {
    let x1 = vec![0.3, 0.9];
    let field = ConditionalField::new(PathSchedule::ot_with(0.1), x1.clone());
    let q = [0.5, 0.2];
    let exact = log_likelihood(&field, &q, &single_point_cfg(1e-6), &mut substream(0, "p")).unwrap().logp;
    let cfg = LikelihoodCfg::new(
        SolverCfg::dopri5(1e-6, 1e-6),
        DivergenceMode::Hutchinson {
            probes: 1,
            distribution: ProbeKind::Gaussian,
        },
    );
    let est: Vec<f64> = log_likelihood_batch(&field, &vec![q.to_vec(); 300], &cfg, 4)
        .into_iter()
        .map(|r| r.unwrap().logp)
        .collect();
    let n = est.len() as f64;
    let mean = est.iter().sum::<f64>() / n;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(var > 0.0);
    assert!((mean - exact).abs() <= 3.0 * (var / n).sqrt(), "{mean} vs {exact}");
}

#[test]
fn model_divergence_matches_finite_differences() {
    let mut m = Mlp::init(ModelConfig::desk(2), 5).unwrap();
    let mut rng = substream(5, "out");
    let n = m.params_mut().len();
    for p in &mut m.params_mut()[n - 2..] {
        for v in p.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let field = ModelField::new(&m, PathSchedule::ot());
    let x = [0.3, -0.2, 1.1, 0.5];
    let div = divergence_exact(&field, 0.4, &x).unwrap();
    for b in 0..2 {
        let mut fd = 0.0;
        for k in 0..2 {
            let h = 1e-5;
            let mut xp = x[2 * b..2 * b + 2].to_vec();
            let mut xm = xp.clone();
            xp[k] += h;
            xm[k] -= h;
            fd += (field.velocity(0.4, &xp).unwrap()[k] - field.velocity(0.4, &xm).unwrap()[k]) / (2.0 * h);
        }
        assert!((fd - div[b]).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {}", div[b]);
    }
}

#[test]
fn uniform_density_has_eight_bits() {
    let d = 4;
    let pixels: Vec<Vec<i64>> = (0..20).map(|i| vec![i * 12, 255, 0, 128]).collect();
    let rep = bpd(&UniformCube { dim: d }, &pixels, 3, 0).unwrap();
    for v in &rep.per_example {
        assert!((v - 8.0).abs() < 1e-12);
    }
    assert!(bpd(&UniformCube { dim: 4 }, &[vec![0, 0, 0, 256]], 1, 0).is_err());
}

#[test]
fn single_draw_equals_plain_dequantized_estimate() {
    let density = MixtureDensity {
        mixture: QuantizedMixture::default(),
        dim: 2,
    };
    let pixels = vec![vec![100i64, 140]];
    let rep = bpd(&density, &pixels, 1, 7).unwrap();
    let mut rng = crate::rng::indexed_substream(7, crate::rng::STREAM_DEQUANT, 0);
    let y: Vec<f64> = pixels[0]
        .iter()
        .map(|&p| crate::data::from_pixel_space(p as f64 + rng.random::<f64>()))
        .collect();
    let plain = -density.mixture.log_density(&y) / (2.0 * std::f64::consts::LN_2) + 7.0;
    assert!((rep.mean - plain).abs() < 1e-12);
}

#[test]
fn cnf_identity_density_matches_prior() {
    let dens = CnfDensity {
        field: ZeroField { dim: 2 },
        cfg: LikelihoodCfg::new(SolverCfg::fixed(Method::Euler, 2), DivergenceMode::Exact),
    };
    let mut rng = substream(0, "x");
    let lp = dens.log_density(&[0.1, 0.2], &mut rng).unwrap();
    assert_eq!(lp, crate::paths::standard_normal_log_density(&[0.1, 0.2]));
}
