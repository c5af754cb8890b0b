//! Micro-timings of chart sub-operations
//! (`cargo test --release --test perf_parts -- --ignored --nocapture`).

use std::time::Instant;

use zvonkin::models;
use zvonkin::transform::{Tolerances, TransformChart};

#[test]
#[ignore]
fn probe_parts() {
    let p = models::DividendParams::default();
    let lifted = models::dividend_lifted(&p);
    let chart =
        TransformChart::build(&lifted, &[0.0, 0.5], 0.45, &Tolerances::default()).unwrap();
    let mut s = chart.scratch();
    let d = 2usize;
    let mut mu_t = vec![0.0; d];
    let mut sig_t = vec![0.0; d * d];
    let n = 200_000usize;

    let t0 = Instant::now();
    let mut acc = 0.0;
    for i in 0..n {
        let u = -0.3 + 0.6 * (i % 1000) as f64 / 999.0;
        let y = 0.35 + 0.3 * ((i / 1000) % 200) as f64 / 199.0;
        chart
            .coeffs_at_with(&[u, y], &mut s, &mut mu_t, &mut sig_t)
            .unwrap();
        acc += mu_t[0];
    }
    println!("coeffs_at_with: {:.0} ns (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    let mut out = vec![0.0; d];
    let t1 = Instant::now();
    let mut acc2 = 0.0;
    for i in 0..n {
        let u = -0.3 + 0.6 * (i % 1000) as f64 / 999.0;
        let y = 0.35 + 0.3 * ((i / 1000) % 200) as f64 / 199.0;
        let z = [u, y];
        chart.apply_h_from(&z, &[u, y], &mut s, &mut out).unwrap();
        acc2 += out[0];
    }
    println!("apply_h_from (close guess): {:.0} ns (acc {acc2:.3})", t1.elapsed().as_nanos() as f64 / n as f64);

    let t2 = Instant::now();
    let mut acc3 = 0.0;
    for i in 0..n {
        let u = -0.3 + 0.6 * (i % 1000) as f64 / 999.0;
        let y = 0.35 + 0.3 * ((i / 1000) % 200) as f64 / 199.0;
        chart.apply_g_with(&[u, y], &mut s, &mut out);
        acc3 += out[0];
    }
    println!("apply_g_with: {:.0} ns (acc {acc3:.3})", t2.elapsed().as_nanos() as f64 / n as f64);

    // field closure cost
    let t3 = Instant::now();
    let mut acc4 = 0.0;
    let mut mu = vec![0.0; d];
    for i in 0..n {
        let u = -0.3 + 0.6 * (i % 1000) as f64 / 999.0;
        lifted.drift_into(&[u, 0.5], &mut mu);
        acc4 += mu[0];
    }
    println!("lifted drift closure: {:.0} ns (acc {acc4:.3})", t3.elapsed().as_nanos() as f64 / n as f64);
}
