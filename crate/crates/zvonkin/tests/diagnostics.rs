//! Diagnostics against analytic oracles: ODE residuals, drift-jump
//! removal, occupation time, local time (Tanaka: E|W_1| = sqrt(2/pi)),
//! and weak agreement of the two simulation routes.

use std::sync::Arc;

use zvonkin::diag::{
    compare_weak_same, drift_jump, local_time_estimate, occupation_fractions_mc, occupation_time,
    ode_residual, roundtrip_error, QvMode, StreamMode,
};
use zvonkin::engine::{counterexample_run, euler_maruyama, SignZero, SimConfig};
use zvonkin::models;
use zvonkin::transform::{Tolerances, TransformChart};

fn dividend_chart() -> TransformChart {
    let p = models::DividendParams::default();
    let lifted = models::dividend_lifted(&p);
    TransformChart::build(&lifted, &[0.0, 0.5], 0.45, &Tolerances::default()).unwrap()
}

fn ball_grid(center: &[f64], radius: f64, n: usize, min_x1: f64) -> Vec<Vec<f64>> {
    // deterministic golden-angle sweep avoiding the hyperplane
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut k = 0usize;
    while out.len() < n {
        let a = (i as f64 + 0.5) / n as f64;
        let r = radius * a.sqrt();
        let th = 6.283185307179586 * ((i as f64 * 0.6180339887498949) % 1.0);
        let x = vec![center[0] + r * th.cos(), center[1] + r * th.sin()];
        i += 1;
        k += 1;
        assert!(k < 20 * n, "grid generation stalled");
        if x[0].abs() < min_x1 {
            continue;
        }
        out.push(x);
    }
    out
}

#[test]
fn ode_residual_zero_for_brownian() {
    let field = models::brownian(2);
    let chart =
        TransformChart::build(&field, &[0.0, 0.0], 1.0, &Tolerances::default()).unwrap();
    let grid = ball_grid(&[0.0, 0.0], 0.9, 100, 1e-5);
    let res = ode_residual(&chart, &grid).unwrap();
    assert!(res.iter().all(|&r| r < 1e-12), "residuals {res:?}");
}

#[test]
fn ode_residual_small_for_scalar_oracle() {
    let field = models::piecewise_constant_1d(0.5, 1.0);
    let chart = TransformChart::build(&field, &[0.0], 1.5, &Tolerances::default()).unwrap();
    let mut grid = Vec::new();
    for i in 0..200 {
        let x = -1.4 + 2.8 * (i as f64) / 199.0;
        if x.abs() >= 1e-5 {
            grid.push(vec![x]);
        }
    }
    let res = ode_residual(&chart, &grid).unwrap();
    assert!(res[0] < 1e-9, "residual {}", res[0]);
}

#[test]
fn ode_residual_rejects_points_on_the_interface() {
    let chart = dividend_chart();
    assert!(ode_residual(&chart, &[vec![1e-8, 0.5]]).is_err());
}

#[test]
fn ode_residual_dividend_within_quadrature_budget() {
    let chart = dividend_chart();
    let grid = ball_grid(&[0.0, 0.5], 0.4, 200, 1e-6);
    let res = ode_residual(&chart, &grid).unwrap();
    assert!(res.iter().all(|&r| r < 1e-6), "residuals {res:?}");
}

#[test]
fn ode_residual_shrinks_with_tighter_quadrature() {
    let p = models::DividendParams::default();
    let lifted = models::dividend_lifted(&p);
    let grid = ball_grid(&[0.0, 0.5], 0.4, 150, 1e-6);
    // pin the rest nodes so the xi-grid refinement is what is measured
    let loose = TransformChart::build(
        &lifted,
        &[0.0, 0.5],
        0.45,
        &Tolerances {
            quad_tol: 1e-8,
            rest_nodes: 21,
            ..Tolerances::default()
        },
    )
    .unwrap();
    let tight = TransformChart::build(
        &lifted,
        &[0.0, 0.5],
        0.45,
        &Tolerances {
            quad_tol: 1e-9,
            rest_nodes: 21,
            ..Tolerances::default()
        },
    )
    .unwrap();
    let res_loose = ode_residual(&loose, &grid).unwrap();
    let res_tight = ode_residual(&tight, &grid).unwrap();
    let worst_loose = res_loose.iter().cloned().fold(0.0f64, f64::max);
    let worst_tight = res_tight.iter().cloned().fold(0.0f64, f64::max);
    assert!(
        worst_tight <= 0.5 * worst_loose,
        "residual did not shrink: {worst_loose:.3e} -> {worst_tight:.3e}"
    );
}

#[test]
fn roundtrip_identity_chart_is_exact() {
    let field = models::brownian(2);
    let chart =
        TransformChart::build(&field, &[0.0, 0.0], 1.0, &Tolerances::default()).unwrap();
    let grid = ball_grid(&[0.0, 0.0], 0.9, 50, 0.0);
    let (worst, failures) = roundtrip_error(&chart, &grid).unwrap();
    assert_eq!(failures, 0);
    assert!(worst < 1e-12);
}

#[test]
fn drift_jump_dividend() {
    let chart = dividend_chart();
    let rest: Vec<Vec<f64>> = [0.35, 0.45, 0.5, 0.6].iter().map(|&y| vec![y]).collect();
    let (orig, trans) = drift_jump(&chart, &rest).unwrap();
    assert!((orig - 1.0).abs() < 1e-12, "original jump {orig}");
    assert!(trans <= 1e-6, "transformed jump {trans:.3e}");
}

#[test]
fn drift_jump_continuous_field_is_zero() {
    let field = models::brownian(2);
    let chart =
        TransformChart::build(&field, &[0.0, 0.0], 1.0, &Tolerances::default()).unwrap();
    let (orig, trans) = drift_jump(&chart, &[vec![0.0], vec![0.3]]).unwrap();
    assert!(orig < 1e-14);
    assert!(trans < 1e-9);
}

#[test]
fn drift_jump_removal_scales_with_kappa() {
    // the cancellation is exact by construction, so even a jump of 100
    // stays removed once a chart certifies (at a much smaller radius)
    for kappa in [0.1, 10.0, 100.0] {
        let p = models::DividendParams {
            kappa,
            ..models::DividendParams::default()
        };
        let lifted = models::dividend_lifted(&p);
        let chart =
            TransformChart::build(&lifted, &[0.0, 0.5], 0.45, &Tolerances::default()).unwrap();
        let (orig, trans) = drift_jump(&chart, &[vec![0.5]]).unwrap();
        assert!((orig - kappa).abs() < 1e-9 * kappa.max(1.0));
        assert!(trans <= 1e-6, "kappa {kappa}: transformed jump {trans:.3e}");
    }
}

#[test]
fn occupation_time_of_linear_path() {
    // x(t) = t on [0,1]: time with |x| < 0.1 is 0.1
    let field = models::deterministic_1d(1.0);
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        ..SimConfig::default()
    };
    let traj = euler_maruyama(&field, &[0.0], &cfg, 0).unwrap();
    let occ = occupation_time(&traj, 0.1).unwrap();
    assert!((occ - 0.1).abs() < 3e-3, "occupation {occ}");
}

#[test]
fn occupation_time_monotone_in_eps() {
    let field = models::brownian(1);
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        ..SimConfig::default()
    };
    let traj = euler_maruyama(&field, &[0.0], &cfg, 3).unwrap();
    let mut prev = 0.0;
    for eps in [0.01, 0.05, 0.1, 0.5, 2.0] {
        let occ = occupation_time(&traj, eps).unwrap();
        assert!(occ >= prev);
        prev = occ;
    }
    // nested sets shrink to the zero-measure interface
    assert!(occupation_time(&traj, 1e-9).unwrap() < 1e-2);
}

#[test]
fn occupation_scaling_linear_for_brownian() {
    // occupation(2 eps) / occupation(eps) -> 2 for Brownian motion
    let field = models::brownian(1);
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        n_paths: 4000,
        base_seed: 2024,
        ..SimConfig::default()
    };
    let fr = occupation_fractions_mc(&field, &[0.0], &cfg, &[0.05, 0.1]).unwrap();
    let ratio = fr[1].1 / fr[0].1;
    assert!(
        (ratio - 2.0).abs() < 0.4,
        "occupation ratio {ratio} (fractions {fr:?})"
    );
}

#[test]
fn zero_diffusion_path_never_near_level_gives_zero_local_time() {
    let field = models::deterministic_1d(0.0);
    let cfg = SimConfig {
        step: 0.01,
        horizon: 1.0,
        ..SimConfig::default()
    };
    let traj = euler_maruyama(&field, &[5.0], &cfg, 0).unwrap();
    let lt = local_time_estimate(&field, &[traj], 0.0, 0.01, QvMode::Model).unwrap();
    assert_eq!(lt, 0.0);
}

#[test]
fn local_time_of_brownian_matches_tanaka() {
    // E Lambda_1(0) = E|W_1| = sqrt(2/pi)
    let field = models::brownian(1);
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        ..SimConfig::default()
    };
    let n_paths = 2000usize;
    let mut trajs = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        trajs.push(euler_maruyama(&field, &[0.0], &cfg, p as u64).unwrap());
    }
    let target = (2.0 / std::f64::consts::PI).sqrt();
    for mode in [QvMode::Model, QvMode::SquaredIncrements] {
        let lt = local_time_estimate(&field, &trajs, 0.0, 0.02, mode).unwrap();
        // sd(|W_1|) ~ 0.6; allow 3 standard errors plus O(eps) bias room
        let se = 0.6 / (n_paths as f64).sqrt();
        assert!(
            (lt - target).abs() < 3.0 * se + 0.03,
            "local time {lt} vs {target} ({mode:?})"
        );
    }
}

#[test]
fn zero_measure_of_exact_zero_states() {
    let field = models::brownian(1);
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        ..SimConfig::default()
    };
    let traj = euler_maruyama(&field, &[0.0], &cfg, 9).unwrap();
    let exact_zero = (1..traj.len()).filter(|&i| traj.state(i)[0] == 0.0).count();
    assert_eq!(exact_zero, 0);
}

#[test]
fn compare_weak_identity_matched_streams() {
    let field = models::brownian(2);
    let cfg = SimConfig {
        step: 0.01,
        horizon: 0.5,
        n_paths: 200,
        base_seed: 7,
        ..SimConfig::default()
    };
    let cmp = compare_weak_same(&field, &[0.1, 0.2], &cfg, Arc::new(|x| x[0]), StreamMode::Matched)
        .unwrap();
    assert!(
        (cmp.estimate_direct - cmp.estimate_transformed).abs() < 1e-10,
        "estimates differ: {} vs {}",
        cmp.estimate_direct,
        cmp.estimate_transformed
    );
}

#[test]
fn compare_weak_scalar_oracle_agrees() {
    let field = models::piecewise_constant_1d(0.5, 1.0);
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        n_paths: 20_000,
        base_seed: 31,
        ..SimConfig::default()
    };
    let cmp =
        compare_weak_same(&field, &[0.0], &cfg, Arc::new(|x| x[0]), StreamMode::Independent)
            .unwrap();
    assert!(cmp.z_score <= 3.0, "z = {} ({cmp:?})", cmp.z_score);
}

#[test]
fn counterexample_contrast_escapes_interval() {
    // with unit diffusion restored, paths leave [-1, 1] quickly
    let field = models::counterexample_scalar();
    let cfg = SimConfig {
        step: 1e-3,
        horizon: 10.0,
        ..SimConfig::default()
    };
    let mut escapes = 0;
    let n_paths = 200;
    for p in 0..n_paths {
        let traj = euler_maruyama(&field, &[0.0], &cfg, p as u64).unwrap();
        if (0..traj.len()).any(|i| traj.state(i)[0].abs() > 1.0) {
            escapes += 1;
        }
    }
    assert!(
        escapes as f64 >= 0.97 * n_paths as f64,
        "only {escapes}/{n_paths} escaped"
    );
}

#[test]
fn counterexample_deterministic_vs_contrast() {
    let collapsed = counterexample_run(0.01, 1.0, SignZero::Zero);
    let max_c = collapsed.states.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(max_c <= 0.005 * (1.0 + 1e-12));
}
