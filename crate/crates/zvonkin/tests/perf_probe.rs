//! Manual timing probes (`cargo test --release --test perf_probe -- --ignored --nocapture`).

use std::time::Instant;

use zvonkin::engine::{PathRunner, Scheme, SimConfig};
use zvonkin::models;
use zvonkin::transform::{Tolerances, TransformChart};

#[test]
#[ignore]
fn probe_step_costs() {
    let p = models::DividendParams::default();
    let lifted = models::dividend_lifted(&p);

    let t0 = Instant::now();
    let chart =
        TransformChart::build(&lifted, &[0.0, 0.5], 0.45, &Tolerances::default()).unwrap();
    println!("chart build: {:?} (radius {})", t0.elapsed(), chart.radius());

    let cfg = SimConfig {
        step: 1e-3,
        horizon: 1.0,
        n_paths: 100,
        base_seed: 11,
        scheme: Scheme::Transformed,
        ..SimConfig::default()
    };
    let mut runner = PathRunner::new(&lifted, &cfg).unwrap();
    // warm the atlas
    runner.run(&[0.1, 0.5], 0).unwrap();
    let t1 = Instant::now();
    let mut steps = 0usize;
    for path in 0..cfg.n_paths as u64 {
        let out = runner.run(&[0.1, 0.5], path).unwrap();
        steps += out.steps_taken;
    }
    let dt = t1.elapsed();
    println!(
        "transformed cold: {steps} steps in {dt:?} -> {:.0} ns/step (atlas {} charts)",
        dt.as_nanos() as f64 / steps as f64,
        runner.atlas_builds(),
    );
    let builds_before = runner.atlas_builds();
    let t1b = Instant::now();
    let mut steps_b = 0usize;
    for path in 0..cfg.n_paths as u64 {
        let out = runner.run(&[0.1, 0.5], path).unwrap();
        steps_b += out.steps_taken;
    }
    let dtb = t1b.elapsed();
    println!(
        "transformed warm: {steps_b} steps in {dtb:?} -> {:.0} ns/step (new builds {})",
        dtb.as_nanos() as f64 / steps_b as f64,
        runner.atlas_builds() - builds_before,
    );

    let cfg_d = SimConfig {
        scheme: Scheme::Direct,
        ..cfg.clone()
    };
    let orig = models::dividend_original(&p);
    let mut runner_d = PathRunner::new(&orig, &cfg_d).unwrap();
    let t2 = Instant::now();
    let mut steps_d = 0usize;
    for path in 0..cfg_d.n_paths as u64 {
        let out = runner_d.run(&[0.6, 0.5], path).unwrap();
        steps_d += out.steps_taken;
    }
    let dt2 = t2.elapsed();
    println!(
        "direct: {steps_d} steps in {dt2:?} -> {:.0} ns/step",
        dt2.as_nanos() as f64 / steps_d as f64
    );

    let pc = models::piecewise_constant_1d(0.5, 1.0);
    let cfg1 = SimConfig {
        scheme: Scheme::Transformed,
        ..cfg.clone()
    };
    let mut runner1 = PathRunner::new(&pc, &cfg1).unwrap();
    runner1.run(&[0.1], 0).unwrap();
    let t3 = Instant::now();
    let mut steps1 = 0usize;
    for path in 0..100u64 {
        let out = runner1.run(&[0.1], path).unwrap();
        steps1 += out.steps_taken;
    }
    let dt3 = t3.elapsed();
    println!(
        "transformed 1d: {steps1} steps in {dt3:?} -> {:.0} ns/step",
        dt3.as_nanos() as f64 / steps1 as f64
    );
}
