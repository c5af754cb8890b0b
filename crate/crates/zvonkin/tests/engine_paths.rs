//! Path-engine contracts: determinism, scheme agreement on trivial
//! transforms, stopping rules, the two-cycle of the no-solution example,
//! and pathwise conjugacy of the surface lift.

use std::sync::Arc;

use zvonkin::engine::{
    counterexample_run, euler_maruyama, monte_carlo, simulate_via_transform, Scheme, SignZero,
    SimConfig, Termination,
};
use zvonkin::field::CoefficientField;
use zvonkin::models;
use zvonkin::surface::SurfaceChart;

fn cfg(step: f64, horizon: f64) -> SimConfig {
    SimConfig {
        step,
        horizon,
        n_paths: 1,
        base_seed: 42,
        ..SimConfig::default()
    }
}

#[test]
fn zero_coefficients_give_constant_path() {
    let field = CoefficientField::new(
        1,
        Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0),
        Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0),
        Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0),
    );
    let traj = euler_maruyama(&field, &[0.7], &cfg(0.1, 1.0), 0).unwrap();
    assert!(traj.states.iter().all(|&v| v == 0.7));
    assert_eq!(traj.termination, Termination::Horizon);
}

#[test]
fn deterministic_euler_accumulates_drift() {
    let field = models::deterministic_1d(1.0);
    let traj = euler_maruyama(&field, &[0.0], &cfg(0.1, 1.0), 0).unwrap();
    assert_eq!(traj.len(), 11);
    assert!((traj.terminal()[0] - 1.0).abs() < 1e-12);
    assert!((traj.times[10] - 1.0).abs() < 1e-12);
}

#[test]
fn final_partial_step_lands_on_horizon() {
    let field = models::deterministic_1d(2.0);
    let traj = euler_maruyama(&field, &[0.0], &cfg(0.1, 0.25), 0).unwrap();
    assert_eq!(traj.times.len(), 4);
    assert!((traj.times[3] - 0.25).abs() < 1e-15);
    assert!((traj.terminal()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn trajectories_are_bit_reproducible() {
    let field = models::piecewise_constant_1d(0.5, 1.0);
    for seed in [1u64, 99, 123456] {
        let mut c = cfg(0.01, 1.0);
        c.base_seed = seed;
        let a = euler_maruyama(&field, &[0.1], &c, 7).unwrap();
        let b = euler_maruyama(&field, &[0.1], &c, 7).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // a different path index gives a different path
        let c2 = euler_maruyama(&field, &[0.1], &c, 8).unwrap();
        assert_ne!(a.states, c2.states);
    }
}

#[test]
fn transformed_equals_direct_for_identity_transform() {
    // Brownian motion: G = id, so both schemes consume the same noise and
    // must produce the same path up to float wiggle in the interpolants.
    let field = models::brownian(2);
    let c = cfg(0.01, 1.0);
    let direct = euler_maruyama(&field, &[0.2, -0.1], &c, 3).unwrap();
    let transformed = simulate_via_transform(&field, &[0.2, -0.1], &c, 3).unwrap();
    assert_eq!(direct.len(), transformed.len());
    let mut worst: f64 = 0.0;
    for (x, y) in direct.states.iter().zip(&transformed.states) {
        worst = worst.max((x - y).abs());
    }
    assert!(worst < 1e-10, "sup difference {worst:.3e}");
}

#[test]
fn transformed_scheme_keeps_chart_consistency() {
    let field = models::piecewise_constant_1d(0.5, 1.0);
    let mut c = cfg(1e-3, 1.0);
    c.check_chart_consistency = true;
    let traj = simulate_via_transform(&field, &[0.1], &c, 5).unwrap();
    assert_eq!(traj.termination, Termination::Horizon);
    assert!(traj.terminal()[0].is_finite());
}

#[test]
fn transformed_scheme_hops_charts_on_dividend() {
    let p = models::DividendParams::default();
    let lifted = models::dividend_lifted(&p);
    let mut c = cfg(1e-3, 1.0);
    c.check_chart_consistency = true;
    c.chart_r_hint = 0.3;
    let traj = simulate_via_transform(&lifted, &[0.1, 0.5], &c, 11).unwrap();
    assert_eq!(traj.termination, Termination::Horizon);
    // theta bounds hold under the clamp
    for i in 0..traj.len() {
        let y = traj.state(i)[1];
        assert!((0.0..=1.0).contains(&y), "estimator left [0,1]: {y}");
    }
}

#[test]
fn explosion_guard_trips_and_is_reported() {
    let field = models::deterministic_1d(10.0);
    let mut c = cfg(0.1, 10.0);
    c.r_max = 2.0;
    let traj = euler_maruyama(&field, &[0.0], &c, 0).unwrap();
    assert_eq!(traj.termination, Termination::ExplosionGuard);
    assert!(traj.len() < 102);
}

#[test]
fn monte_carlo_constant_functional() {
    let field = models::brownian(1);
    let mut c = cfg(0.1, 1.0);
    c.n_paths = 50;
    let s = monte_carlo(&field, &[0.0], &c, |_| 1.0).unwrap();
    assert_eq!(s.estimate, 1.0);
    assert_eq!(s.std_error, 0.0);
    assert_eq!(s.n_effective, 50);
}

#[test]
fn monte_carlo_brownian_moments() {
    let field = models::brownian(1);
    let mut c = cfg(0.01, 1.0);
    c.n_paths = 20_000;
    // E[W_T^2] = T
    let s2 = monte_carlo(&field, &[0.0], &c, |x| x[0] * x[0]).unwrap();
    assert!(
        (s2.estimate - 1.0).abs() < 3.0 * s2.std_error,
        "E[W^2] = {} +- {}",
        s2.estimate,
        s2.std_error
    );
    // martingale mean from x0
    let s1 = monte_carlo(&field, &[0.4], &c, |x| x[0]).unwrap();
    assert!((s1.estimate - 0.4).abs() < 3.0 * s1.std_error);
}

#[test]
fn monte_carlo_needs_two_paths() {
    let field = models::brownian(1);
    let mut c = cfg(0.1, 1.0);
    c.n_paths = 1;
    assert!(monte_carlo(&field, &[0.0], &c, |x| x[0]).is_err());
}

#[test]
fn counterexample_two_cycle_exact() {
    // h = 0.1, sgn(0) = 0: states alternate 0, h/2, 0, h/2, ...
    let traj = counterexample_run(0.1, 0.4, SignZero::Zero);
    let h = 0.1;
    assert_eq!(traj.states.len(), 5);
    assert_eq!(traj.states[0], 0.0);
    assert_eq!(traj.states[1], h / 2.0);
    assert_eq!(traj.states[2], 0.0);
    assert_eq!(traj.states[3], h / 2.0);
    assert_eq!(traj.states[4], 0.0);
}

#[test]
fn counterexample_collapses_with_grid_for_every_step_size() {
    for h in [0.1, 0.01, 1e-3] {
        let traj = counterexample_run(h, 10.0 * h.max(0.01), SignZero::Zero);
        let bound = h / 2.0;
        for &x in &traj.states {
            assert!(x.abs() <= bound * (1.0 + 1e-12), "|{x}| > {bound}");
        }
    }
}

#[test]
fn counterexample_plus_convention_still_bounded_by_h() {
    let h = 0.05;
    let traj = counterexample_run(h, 2.0, SignZero::Plus);
    for &x in &traj.states {
        assert!(x.abs() <= h * (1.0 + 1e-12));
    }
}

#[test]
fn lift_is_pathwise_conjugate_on_smooth_drift() {
    // Smooth drift (identical halves) with a curved threshold: simulating
    // the original system and the lifted system with the same noise keeps
    // |f(X_t) - U_t| at the discretization scale, and the gap shrinks
    // with the step size.
    let f_expr = |x: &[f64]| x[0] - 0.2 * x[1] * x[1];
    let chart = SurfaceChart::new(
        2,
        Arc::new(f_expr),
        Some(Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = 1.0;
            out[1] = -0.4 * x[1];
        })),
        Some(Arc::new(|_x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&[0.0, 0.0, 0.0, -0.4]);
        })),
    );
    let smooth = CoefficientField::new(
        2,
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = -0.1 * x[0];
            out[1] = 0.05;
        }),
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = -0.1 * x[0];
            out[1] = 0.05;
        }),
        Arc::new(|_x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 0.3]);
        }),
    );
    let lifted = chart.lift(&smooth).unwrap();

    let x0 = [0.4, 0.2];
    let u0 = f_expr(&x0);
    let mut gaps = Vec::new();
    for &h in &[1e-2, 1e-3] {
        let c = cfg(h, 0.5);
        let mut worst: f64 = 0.0;
        for path in 0..8u64 {
            let orig = euler_maruyama(&smooth, &x0, &c, path).unwrap();
            let lift = euler_maruyama(&lifted, &[u0, x0[1]], &c, path).unwrap();
            assert_eq!(orig.len(), lift.len());
            for i in 0..orig.len() {
                let fx = f_expr(orig.state(i));
                let u = lift.state(i)[0];
                worst = worst.max((fx - u).abs());
            }
        }
        gaps.push(worst);
    }
    // crude Ito-Taylor envelope: the dominant mismatch is the quadratic
    // correction ~ |Hf| |sigma|^2, accumulated as sqrt(T h) noise
    let envelope = |h: f64| 6.0 * (0.5f64 * h).sqrt() * 0.4 + 50.0 * h;
    assert!(gaps[0] < envelope(1e-2), "gap {} at h=1e-2", gaps[0]);
    assert!(gaps[1] < envelope(1e-3), "gap {} at h=1e-3", gaps[1]);
    // and the gap shrinks with h
    assert!(
        gaps[1] < gaps[0],
        "conjugacy gap did not shrink: {gaps:?}"
    );
}

#[test]
fn scheme_enum_roundtrip_in_config() {
    let mut c = SimConfig::default();
    c.scheme = Scheme::Transformed;
    assert!(c.validate().is_ok());
    c.chart_exit_fraction = 1.5;
    assert!(c.validate().is_err());
}
