//! Measurable checks of the analytical facts the construction rests on:
//! ODE residuals of the transform, inversion roundtrip error, drift-jump
//! removal, occupation time near the interface, local time, and weak
//! agreement between the two simulation routes.

use crate::engine::{
    monte_carlo, McSummary, PathRunner, Scheme, SimConfig, StepInfo, StepObserver, Termination,
    Trajectory,
};
use crate::field::CoefficientField;
use crate::math;
use crate::transform::TransformChart;
use crate::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Scalar functional of a terminal state.
pub type PhiFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Aggregated diagnostics, serialized by the CLI as JSON.
#[derive(Debug, Clone, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiagnosticsReport {
    /// Max ODE residual per transform component (index 0 is g1).
    pub ode_residual_max: Vec<f64>,
    pub roundtrip_max: Option<f64>,
    pub roundtrip_failures: usize,
    pub drift_jump_original: Option<f64>,
    pub drift_jump_transformed: Option<f64>,
    /// Occupation fraction per epsilon.
    pub occupation_fraction: Vec<(f64, f64)>,
    pub local_time_estimate: Option<f64>,
    pub weak_comparison: Option<WeakComparison>,
    /// Uniqueness of solutions cannot be tested by any finite simulation;
    /// only the consistency of the two routes is measured here.
    pub notes: Vec<String>,
}

/// Side-by-side weak estimates of the two schemes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeakComparison {
    pub estimate_direct: f64,
    pub estimate_transformed: f64,
    pub se_direct: f64,
    pub se_transformed: f64,
    pub combined_se: f64,
    pub z_score: f64,
    pub n_effective_direct: usize,
    pub n_effective_transformed: usize,
    pub terminations_direct: BTreeMap<String, usize>,
    pub terminations_transformed: BTreeMap<String, usize>,
}

impl WeakComparison {
    pub fn from_summaries(direct: &McSummary, transformed: &McSummary) -> Self {
        let combined_se =
            math::sqrt(direct.std_error * direct.std_error
                + transformed.std_error * transformed.std_error);
        let z_score = math::abs(direct.estimate - transformed.estimate) / combined_se;
        WeakComparison {
            estimate_direct: direct.estimate,
            estimate_transformed: transformed.estimate,
            se_direct: direct.std_error,
            se_transformed: transformed.std_error,
            combined_se,
            z_score,
            n_effective_direct: direct.n_effective,
            n_effective_transformed: transformed.n_effective,
            terminations_direct: direct.terminations.clone(),
            terminations_transformed: transformed.terminations.clone(),
        }
    }
}

/// Max absolute residual of the defining ODEs over the grid, per component:
/// `mu_1 g1' + 1/2 A g1''` for k = 1 and `mu_k + mu_1 gk' + 1/2 A gk''`
/// for k >= 2, with the second derivative taken from the cached profiles
/// (differentiating the interpolant) so the number measures how well the
/// built cache satisfies the equations.
pub fn ode_residual(chart: &TransformChart, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = chart.dim();
    let mut max_res = vec![0.0f64; d];
    for x in grid {
        if math::abs(x[0]) < 1e-6 {
            return Err(Error::Input(format!(
                "grid must avoid the hyperplane by 1e-6, got x1 = {}",
                x[0]
            )));
        }
        let half = chart.field().half_at(x);
        let mu = chart.field().drift_half(half, x);
        let a11 = chart.field().a11(x);
        for k in 1..=d {
            let dg = chart.dg_dxi(k, x)?;
            let d2g = chart.d2g_dxi2_cached(k, x)?;
            let res = if k == 1 {
                mu[0] * dg + 0.5 * a11 * d2g
            } else {
                mu[k - 1] + mu[0] * dg + 0.5 * a11 * d2g
            };
            max_res[k - 1] = max_res[k - 1].max(math::abs(res));
        }
    }
    Ok(max_res)
}

/// Max roundtrip error `|H(G(x)) - x|` over the sample; inversion failures
/// are counted separately rather than aborting the sweep.
pub fn roundtrip_error(chart: &TransformChart, sample: &[Vec<f64>]) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for x in sample {
        let z = chart.apply_g(x)?;
        match chart.apply_h(&z) {
            Ok(back) => worst = worst.max(math::dist(&back, x)),
            Err(_) => failures += 1,
        }
    }
    Ok((worst, failures))
}

/// Drift jump across the interface before and after the transform.
///
/// `jump_original` is `max |mu+(0, r) - mu-(0, r)|` over the rest grid;
/// `jump_transformed` probes the transformed drift one-sidedly at
/// `z1 = +-1e-7` (the hyperplane maps to itself, so `(0, r)` is in the
/// image and the offset dominates derivative-evaluation noise).
pub fn drift_jump(chart: &TransformChart, rest_grid: &[Vec<f64>]) -> Result<(f64, f64)> {
    let d = chart.dim();
    let offset = 1e-7;
    let mut jump_orig = 0.0f64;
    let mut jump_trans = 0.0f64;
    for rest in rest_grid {
        if rest.len() != d - 1 {
            return Err(Error::Input(format!(
                "rest point has {} coordinates, expected {}",
                rest.len(),
                d - 1
            )));
        }
        let mut x = vec![0.0; d];
        x[1..].copy_from_slice(rest);
        let plus = chart.field().drift_half(crate::field::Half::Plus, &x);
        let minus = chart.field().drift_half(crate::field::Half::Minus, &x);
        jump_orig = jump_orig.max(math::dist(&plus, &minus));

        let mut z = vec![0.0; d];
        z[1..].copy_from_slice(rest);
        z[0] = offset;
        let (mu_p, _) = chart.transformed_coefficients(&z)?;
        z[0] = -offset;
        let (mu_m, _) = chart.transformed_coefficients(&z)?;
        jump_trans = jump_trans.max(math::dist(&mu_p, &mu_m));
    }
    Ok((jump_orig, jump_trans))
}

/// Time-weighted fraction of a trajectory with `|x1| < eps`.
pub fn occupation_time(traj: &Trajectory, eps: f64) -> Result<f64> {
    if traj.is_empty() || traj.len() < 2 {
        return Err(Error::Input(String::from("trajectory too short")));
    }
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 1..traj.len() {
        let dt = traj.times[i] - traj.times[i - 1];
        total += dt;
        if math::abs(traj.state(i)[0]) < eps {
            inside += dt;
        }
    }
    Ok(inside / total)
}

/// Streaming accumulator for occupation fractions at several widths.
#[derive(Debug, Clone)]
pub struct OccupationAccumulator {
    pub eps: Vec<f64>,
    pub time_inside: Vec<f64>,
    pub total_time: f64,
}

impl OccupationAccumulator {
    pub fn new(eps: &[f64]) -> Self {
        OccupationAccumulator {
            eps: eps.to_vec(),
            time_inside: vec![0.0; eps.len()],
            total_time: 0.0,
        }
    }

    pub fn fractions(&self) -> Vec<(f64, f64)> {
        self.eps
            .iter()
            .zip(&self.time_inside)
            .map(|(&e, &t)| (e, t / self.total_time))
            .collect()
    }
}

impl StepObserver for OccupationAccumulator {
    fn observe(&mut self, info: &StepInfo<'_>) {
        if info.dt == 0.0 {
            return;
        }
        self.total_time += info.dt;
        let x1 = math::abs(info.x[0]);
        for (i, &e) in self.eps.iter().enumerate() {
            if x1 < e {
                self.time_inside[i] += info.dt;
            }
        }
    }
}

/// Which quadratic-variation increments feed the local-time estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QvMode {
    /// `(sigma sigma^T)_11(X_n) dt` — the model quadratic variation
    /// (lower variance).
    #[default]
    Model,
    /// `(Delta X^1_n)^2` — squared increments of the realized path.
    SquaredIncrements,
}

/// Local-time estimator of the first coordinate at level `a`:
/// `(1/2eps) sum_n 1{|X^1_n - a| < eps} d[X^1]_n`, averaged over paths.
pub fn local_time_estimate(
    field: &CoefficientField,
    trajectories: &[Trajectory],
    a: f64,
    eps: f64,
    mode: QvMode,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Input(String::from("no trajectories")));
    }
    let mut sum = 0.0;
    for traj in trajectories {
        sum += local_time_single(field, traj, a, eps, mode)?;
    }
    Ok(sum / trajectories.len() as f64)
}

fn local_time_single(
    field: &CoefficientField,
    traj: &Trajectory,
    a: f64,
    eps: f64,
    mode: QvMode,
) -> Result<f64> {
    if traj.len() < 2 {
        return Err(Error::Input(String::from("trajectory too short")));
    }
    let mut acc = 0.0;
    for i in 0..traj.len() - 1 {
        let x = traj.state(i);
        if math::abs(x[0] - a) < eps {
            let qv = match mode {
                QvMode::Model => {
                    let dt = traj.times[i + 1] - traj.times[i];
                    field.a11(x) * dt
                }
                QvMode::SquaredIncrements => {
                    let dx = traj.state(i + 1)[0] - x[0];
                    dx * dx
                }
            };
            acc += qv;
        }
    }
    Ok(acc / (2.0 * eps))
}

/// Streaming local-time accumulator (avoids storing trajectories).
pub struct LocalTimeAccumulator {
    field: CoefficientField,
    pub a: f64,
    pub eps: f64,
    pub sum: f64,
    prev_x1: f64,
    prev_in_window: bool,
    prev_a11: f64,
    pub mode: QvMode,
}

impl LocalTimeAccumulator {
    pub fn new(field: &CoefficientField, a: f64, eps: f64, mode: QvMode) -> Self {
        LocalTimeAccumulator {
            field: field.clone(),
            a,
            eps,
            sum: 0.0,
            prev_x1: f64::NAN,
            prev_in_window: false,
            prev_a11: 0.0,
            mode,
        }
    }

    pub fn value(&self, n_paths: usize) -> f64 {
        self.sum / (2.0 * self.eps * n_paths as f64)
    }
}

impl StepObserver for LocalTimeAccumulator {
    fn observe(&mut self, info: &StepInfo<'_>) {
        if info.dt == 0.0 {
            // new path start
            self.prev_x1 = info.x[0];
            self.prev_in_window = math::abs(info.x[0] - self.a) < self.eps;
            if self.prev_in_window {
                self.prev_a11 = self.field.a11(info.x);
            }
            return;
        }
        if self.prev_in_window {
            match self.mode {
                QvMode::Model => self.sum += self.prev_a11 * info.dt,
                QvMode::SquaredIncrements => {
                    let dx = info.x[0] - self.prev_x1;
                    self.sum += dx * dx;
                }
            }
        }
        self.prev_x1 = info.x[0];
        self.prev_in_window = math::abs(info.x[0] - self.a) < self.eps;
        if self.prev_in_window {
            self.prev_a11 = self.field.a11(info.x);
        }
    }
}

/// One simulation route of a weak comparison: a field in its own
/// coordinates, a start point, and the functional expressed in those
/// coordinates.
#[derive(Clone)]
pub struct RouteSpec {
    pub field: CoefficientField,
    pub x0: Vec<f64>,
    pub phi: PhiFn,
}

/// How the two routes draw noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Independent seeds (the default for the z-test, which assumes
    /// independent estimates).
    Independent,
    /// Identical increments in both routes (pathwise comparisons).
    Matched,
}

/// Per-route seeds derived from a base seed; shared by the sequential and
/// the parallel comparison drivers so they agree bit for bit.
pub fn route_seeds(base_seed: u64, streams: StreamMode) -> (u64, u64) {
    match streams {
        StreamMode::Matched => (base_seed, base_seed),
        StreamMode::Independent => (
            crate::rng::mix64(base_seed ^ 0x9E37_79B9_7F4A_7C15),
            crate::rng::mix64(base_seed ^ 0x6A09_E667_F3BC_C909),
        ),
    }
}

/// Runs the direct scheme on `direct` and the transformed scheme on
/// `transformed` and z-tests the difference of the weak estimates.
///
/// Both routes must finish at least 90% of their paths, otherwise the
/// comparison is refused with the termination breakdown in the message.
pub fn compare_weak(
    direct: &RouteSpec,
    transformed: &RouteSpec,
    cfg: &SimConfig,
    streams: StreamMode,
) -> Result<WeakComparison> {
    let mut cfg_d = cfg.clone();
    cfg_d.scheme = Scheme::Direct;
    let mut cfg_t = cfg.clone();
    cfg_t.scheme = Scheme::Transformed;
    let (seed_d, seed_t) = route_seeds(cfg.base_seed, streams);
    cfg_d.base_seed = seed_d;
    cfg_t.base_seed = seed_t;
    let sum_d = monte_carlo(&direct.field, &direct.x0, &cfg_d, |x| (direct.phi)(x))?;
    let sum_t = monte_carlo(&transformed.field, &transformed.x0, &cfg_t, |x| {
        (transformed.phi)(x)
    })?;
    check_completion(&sum_d, "direct")?;
    check_completion(&sum_t, "transformed")?;
    Ok(WeakComparison::from_summaries(&sum_d, &sum_t))
}

pub fn check_completion(summary: &McSummary, label: &str) -> Result<()> {
    if (summary.n_effective as f64) < 0.9 * summary.n_paths as f64 {
        return Err(Error::Estimation(format!(
            "{label} scheme finished only {}/{} paths (terminations: {:?})",
            summary.n_effective, summary.n_paths, summary.terminations
        )));
    }
    Ok(())
}

/// Convenience for hyperplane-form models: both routes share the field,
/// start point and functional.
pub fn compare_weak_same(
    field: &CoefficientField,
    x0: &[f64],
    cfg: &SimConfig,
    phi: PhiFn,
    streams: StreamMode,
) -> Result<WeakComparison> {
    let route = RouteSpec {
        field: field.clone(),
        x0: x0.to_vec(),
        phi,
    };
    compare_weak(&route, &route, cfg, streams)
}

/// Occupation fractions across paths via the streaming accumulator.
pub fn occupation_fractions_mc(
    field: &CoefficientField,
    x0: &[f64],
    cfg: &SimConfig,
    eps: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut runner = PathRunner::new(field, cfg)?;
    let mut acc = OccupationAccumulator::new(eps);
    let mut completed = 0usize;
    for p in 0..cfg.n_paths {
        let outcome = runner.run_with(x0, p as u64, &mut acc)?;
        if outcome.termination == Termination::Horizon {
            completed += 1;
        }
    }
    if completed == 0 {
        return Err(Error::Estimation(String::from("no completed paths")));
    }
    Ok(acc.fractions())
}
