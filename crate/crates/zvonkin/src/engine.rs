//! Path simulation: Euler–Maruyama directly on the coefficients, or via
//! the drift-removing transform with chart hopping, plus the Monte Carlo
//! harness.
//!
//! Both schemes consume Brownian increments through the same counter-based
//! map `(seed, path, step, coordinate) -> N(0, dt)`, so they see the same
//! noise in the same order and trajectories are pure functions of
//! `(field, x0, config, path_index)` regardless of worker scheduling.

use crate::field::CoefficientField;
use crate::math;
use crate::rng::NoiseStream;
use crate::transform::{ChartAtlas, ChartScratch, Tolerances, TransformChart};
use crate::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Which route produces the paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Scheme {
    #[default]
    Direct,
    Transformed,
}

/// Why a path stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Termination {
    /// Reached the time horizon.
    Horizon,
    /// `|X| > r_max`: the explosion guard tripped. Under the global
    /// existence conditions this indicates numerics and is always
    /// surfaced, never dropped.
    ExplosionGuard,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Horizon => "horizon",
            Termination::ExplosionGuard => "explosion_guard",
        }
    }
}

/// Simulation parameters.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    /// Time step; the final step may be shorter to land exactly on the
    /// horizon.
    pub step: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub base_seed: u64,
    /// Explosion guard: the path stops once its norm exceeds this.
    pub r_max: f64,
    /// Fraction of the chart radius at which the transformed scheme hops
    /// to a fresh chart.
    pub chart_exit_fraction: f64,
    /// Radius hint for newly built charts.
    pub chart_r_hint: f64,
    pub scheme: Scheme,
    /// Apply the field's componentwise clamp after each step.
    pub apply_projection: bool,
    /// Verify `|G(X_n) - Z_n| <= newton_tol` every step (costs one extra
    /// `G` evaluation per step; used by tests and diagnostics).
    pub check_chart_consistency: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub tolerances: Tolerances,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            step: 1e-3,
            horizon: 1.0,
            n_paths: 1000,
            base_seed: 1,
            r_max: 1e6,
            chart_exit_fraction: 0.8,
            chart_r_hint: 0.5,
            scheme: Scheme::Direct,
            apply_projection: true,
            check_chart_consistency: false,
            tolerances: Tolerances::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.horizon > 0.0 && self.step <= self.horizon) {
            return Err(Error::Input(format!(
                "need 0 < step <= horizon, got step {} horizon {}",
                self.step, self.horizon
            )));
        }
        if !(self.chart_exit_fraction > 0.0 && self.chart_exit_fraction < 1.0) {
            return Err(Error::Input(String::from(
                "chart_exit_fraction must lie in (0, 1)",
            )));
        }
        if !(self.r_max > 0.0 && self.chart_r_hint > 0.0) {
            return Err(Error::Input(String::from(
                "r_max and chart_r_hint must be positive",
            )));
        }
        Ok(())
    }

    /// Number of steps: full steps of `step` plus one final partial step.
    /// A horizon that is a multiple of the step up to float rounding is
    /// treated as exact, so even grids use the step bit-for-bit.
    pub fn n_steps(&self) -> usize {
        let ratio = self.horizon / self.step;
        let rounded = math::round(ratio);
        let n = if math::abs(ratio - rounded) < 1e-9 * rounded.max(1.0) {
            rounded
        } else {
            math::ceil(ratio)
        };
        (n as usize).max(1)
    }

    /// Duration of step `n` (0-based).
    pub fn dt(&self, n: usize) -> f64 {
        let n_steps = self.n_steps();
        if n + 1 < n_steps {
            return self.step;
        }
        let rem = self.horizon - (n_steps - 1) as f64 * self.step;
        if math::abs(rem - self.step) <= 1e-9 * self.step {
            self.step
        } else {
            rem
        }
    }
}

/// A realized path on the time grid.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flat states, `dim` entries per grid time.
    pub states: Vec<f64>,
    pub termination: Termination,
    pub chart_rebuilds: usize,
    pub seed_used: u64,
    pub path_index: u64,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

/// Per-step data passed to observers.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<'a> {
    pub step: usize,
    pub t: f64,
    pub x: &'a [f64],
    /// Time since the previous grid point (0 at the initial state).
    pub dt: f64,
}

/// Streaming hook over a path; the engine never stores states unless the
/// observer does.
pub trait StepObserver {
    fn observe(&mut self, info: &StepInfo<'_>);
}

/// Observer that discards everything (terminal-only runs).
pub struct NullObserver;

impl StepObserver for NullObserver {
    fn observe(&mut self, _info: &StepInfo<'_>) {}
}

/// Adapts a closure into an observer.
pub struct FnObserver<F>(pub F);

impl<F: FnMut(&StepInfo<'_>)> StepObserver for FnObserver<F> {
    fn observe(&mut self, info: &StepInfo<'_>) {
        (self.0)(info)
    }
}

/// Outcome of one streamed path.
#[derive(Debug, Clone)]
pub struct PathOutcome {
    pub terminal: Vec<f64>,
    pub termination: Termination,
    pub chart_rebuilds: usize,
    pub steps_taken: usize,
}

/// Simulates paths of one field under one configuration. Holds the chart
/// atlas and scratch buffers, so one runner per worker; runners of the
/// same inputs produce identical results.
pub struct PathRunner {
    field: CoefficientField,
    cfg: SimConfig,
    atlas: Option<ChartAtlas>,
    // scratch
    x: Vec<f64>,
    z: Vec<f64>,
    mu: Vec<f64>,
    sig: Vec<f64>,
    dw: Vec<f64>,
    predictor: Vec<f64>,
    x_new: Vec<f64>,
    gcheck: Vec<f64>,
    chart_scratch: Option<ChartScratch>,
}

impl PathRunner {
    pub fn new(field: &CoefficientField, cfg: &SimConfig) -> Result<Self> {
        Self::with_atlas(field, cfg, None)
    }

    /// Builds a runner seeded with an existing atlas (from a previous run
    /// or another worker); charts are deterministic in the snapped centre,
    /// so a warm atlas changes cost, never results.
    pub fn with_atlas(
        field: &CoefficientField,
        cfg: &SimConfig,
        warm_atlas: Option<ChartAtlas>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = field.dim();
        if cfg.scheme == Scheme::Transformed && !field.is_hyperplane_form() {
            return Err(Error::Input(String::from(
                "transformed scheme needs the discontinuity on {x1 = 0}; lift the surface first",
            )));
        }
        let atlas = match cfg.scheme {
            Scheme::Direct => None,
            Scheme::Transformed => Some(warm_atlas.unwrap_or_else(|| {
                ChartAtlas::new(field, cfg.chart_r_hint, &cfg.tolerances)
            })),
        };
        Ok(PathRunner {
            field: field.clone(),
            cfg: cfg.clone(),
            atlas,
            x: vec![0.0; d],
            z: vec![0.0; d],
            mu: vec![0.0; d],
            sig: vec![0.0; d * d],
            dw: vec![0.0; d],
            predictor: vec![0.0; d],
            x_new: vec![0.0; d],
            gcheck: vec![0.0; d],
            chart_scratch: None,
        })
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn atlas_builds(&self) -> usize {
        self.atlas.as_ref().map_or(0, |a| a.builds)
    }

    /// Surrenders the (possibly warmed-up) atlas for reuse elsewhere.
    pub fn into_atlas(self) -> Option<ChartAtlas> {
        self.atlas
    }

    /// Runs one path, streaming states into the observer.
    pub fn run_with<O: StepObserver>(
        &mut self,
        x0: &[f64],
        path_index: u64,
        obs: &mut O,
    ) -> Result<PathOutcome> {
        self.run_seeded_with(x0, self.cfg.base_seed, path_index, obs)
    }

    /// Runs one path under an explicit seed (overriding the configured
    /// one); multi-seed experiments reuse the runner and its charts.
    pub fn run_seeded_with<O: StepObserver>(
        &mut self,
        x0: &[f64],
        seed: u64,
        path_index: u64,
        obs: &mut O,
    ) -> Result<PathOutcome> {
        if x0.len() != self.field.dim() {
            return Err(Error::Input(format!(
                "initial state has dimension {}, field expects {}",
                x0.len(),
                self.field.dim()
            )));
        }
        match self.cfg.scheme {
            Scheme::Direct => self.run_direct(x0, seed, path_index, obs),
            Scheme::Transformed => self.run_transformed(x0, seed, path_index, obs),
        }
    }

    /// Runs one path and returns only its outcome.
    pub fn run(&mut self, x0: &[f64], path_index: u64) -> Result<PathOutcome> {
        self.run_with(x0, path_index, &mut NullObserver)
    }

    pub fn run_seeded(&mut self, x0: &[f64], seed: u64, path_index: u64) -> Result<PathOutcome> {
        self.run_seeded_with(x0, seed, path_index, &mut NullObserver)
    }

    fn run_direct<O: StepObserver>(
        &mut self,
        x0: &[f64],
        seed: u64,
        path_index: u64,
        obs: &mut O,
    ) -> Result<PathOutcome> {
        let d = self.field.dim();
        let stream = NoiseStream::new(seed, path_index);
        let n_steps = self.cfg.n_steps();
        self.x.copy_from_slice(x0);
        obs.observe(&StepInfo {
            step: 0,
            t: 0.0,
            x: &self.x,
            dt: 0.0,
        });
        let mut termination = Termination::Horizon;
        let mut steps_taken = 0;
        let mut t = 0.0;
        for n in 0..n_steps {
            let dt = self.cfg.dt(n);
            let sqrt_dt = math::sqrt(dt);
            stream.fill_increments(n as u64, sqrt_dt, &mut self.dw);
            self.field.drift_into(&self.x, &mut self.mu);
            self.field.diffusion_into(&self.x, &mut self.sig);
            for i in 0..d {
                let mut v = self.x[i] + self.mu[i] * dt;
                for j in 0..d {
                    v += self.sig[i * d + j] * self.dw[j];
                }
                self.x_new[i] = v;
            }
            if self.cfg.apply_projection {
                if let Some(p) = self.field.projection() {
                    p.apply(&mut self.x_new);
                }
            }
            if !self.x_new.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    step: n,
                    message: format!("non-finite state {:?}", self.x_new),
                });
            }
            self.x.copy_from_slice(&self.x_new);
            t += dt;
            steps_taken = n + 1;
            obs.observe(&StepInfo {
                step: n + 1,
                t,
                x: &self.x,
                dt,
            });
            if math::norm(&self.x) > self.cfg.r_max {
                termination = Termination::ExplosionGuard;
                break;
            }
        }
        Ok(PathOutcome {
            terminal: self.x.clone(),
            termination,
            chart_rebuilds: 0,
            steps_taken,
        })
    }

    fn run_transformed<O: StepObserver>(
        &mut self,
        x0: &[f64],
        seed: u64,
        path_index: u64,
        obs: &mut O,
    ) -> Result<PathOutcome> {
        let d = self.field.dim();
        let stream = NoiseStream::new(seed, path_index);
        let n_steps = self.cfg.n_steps();
        let rho = self.cfg.chart_exit_fraction;

        self.x.copy_from_slice(x0);
        let atlas = self.atlas.as_mut().expect("transformed runner has an atlas");
        let mut chart: Arc<TransformChart> = atlas.chart_for(&self.x)?;
        let mut scratch = self
            .chart_scratch
            .take()
            .unwrap_or_else(|| chart.scratch());
        let mut rebuilds = 0usize;
        chart.apply_g_with(&self.x, &mut scratch, &mut self.z);

        obs.observe(&StepInfo {
            step: 0,
            t: 0.0,
            x: &self.x,
            dt: 0.0,
        });
        let mut termination = Termination::Horizon;
        let mut steps_taken = 0;
        let mut t = 0.0;
        let mut mu_t = vec![0.0; d];
        let mut sig_t = vec![0.0; d * d];

        for n in 0..n_steps {
            let dt = self.cfg.dt(n);
            let sqrt_dt = math::sqrt(dt);
            stream.fill_increments(n as u64, sqrt_dt, &mut self.dw);

            // transformed coefficients at the current pre-image x = H(z)
            chart
                .coeffs_at_with(&self.x, &mut scratch, &mut mu_t, &mut sig_t)
                .map_err(|e| e.at_step(n))?;
            for i in 0..d {
                let mut v = self.z[i] + mu_t[i] * dt;
                for j in 0..d {
                    v += sig_t[i * d + j] * self.dw[j];
                }
                self.z[i] = v;
            }
            if !self.z.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    step: n,
                    message: format!("non-finite transformed state {:?}", self.z),
                });
            }

            // Euler predictor in x-coordinates starts Newton 2-3 iterations
            // from the answer; mu and sigma at x were just evaluated inside
            // coeffs_at_with
            {
                let mu = scratch.last_mu();
                let sig = scratch.last_sigma();
                for i in 0..d {
                    let mut v = self.x[i] + mu[i] * dt;
                    for j in 0..d {
                        v += sig[i * d + j] * self.dw[j];
                    }
                    self.predictor[i] = v;
                }
            }

            // map back; on inversion failure rebuild the chart once at the
            // current state and retry
            let inverted = chart.apply_h_from(&self.z, &self.predictor, &mut scratch, &mut self.x_new);
            if inverted.is_err() {
                chart = atlas.chart_for(&self.x)?;
                rebuilds += 1;
                chart.apply_g_with(&self.x, &mut scratch, &mut self.z);
                // redo the step on the fresh chart
                chart
                    .coeffs_at_with(&self.x, &mut scratch, &mut mu_t, &mut sig_t)
                    .map_err(|e| e.at_step(n))?;
                for i in 0..d {
                    let mut v = self.z[i] + mu_t[i] * dt;
                    for j in 0..d {
                        v += sig_t[i * d + j] * self.dw[j];
                    }
                    self.z[i] = v;
                }
                chart
                    .apply_h_from(&self.z, &self.predictor, &mut scratch, &mut self.x_new)
                    .map_err(|e| e.at_step(n))?;
            }

            if self.cfg.apply_projection {
                if let Some(p) = self.field.projection() {
                    if p.apply(&mut self.x_new) {
                        // clamping moved x off the chart image; re-sync z
                        chart.apply_g_with(&self.x_new, &mut scratch, &mut self.z);
                    }
                }
            }
            if !self.x_new.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    step: n,
                    message: format!("non-finite state {:?}", self.x_new),
                });
            }
            self.x.copy_from_slice(&self.x_new);
            t += dt;
            steps_taken = n + 1;

            if self.cfg.check_chart_consistency {
                chart.apply_g_with(&self.x, &mut scratch, &mut self.gcheck);
                let err = math::dist(&self.gcheck, &self.z);
                if err > 10.0 * self.cfg.tolerances.newton_tol + 1e-14 {
                    return Err(Error::Numeric {
                        step: n,
                        message: format!(
                            "chart consistency violated: |G(x) - z| = {err:.3e}"
                        ),
                    });
                }
            }

            obs.observe(&StepInfo {
                step: n + 1,
                t,
                x: &self.x,
                dt,
            });
            if math::norm(&self.x) > self.cfg.r_max {
                termination = Termination::ExplosionGuard;
                break;
            }

            // hop to a fresh chart when the path nears the validity edge
            if math::dist(&self.x, chart.center()) > rho * chart.radius() {
                chart = atlas.chart_for(&self.x)?;
                rebuilds += 1;
                chart.apply_g_with(&self.x, &mut scratch, &mut self.z);
            }
        }
        self.chart_scratch = Some(scratch);
        Ok(PathOutcome {
            terminal: self.x.clone(),
            termination,
            chart_rebuilds: rebuilds,
            steps_taken,
        })
    }
}

impl Error {
    fn at_step(self, step: usize) -> Error {
        match self {
            Error::Numeric { message, .. } => Error::Numeric { step, message },
            Error::Inversion(m) => Error::Numeric {
                step,
                message: format!("inversion failed: {m}"),
            },
            other => other,
        }
    }
}

/// Records a full trajectory.
struct Recorder {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
}

impl StepObserver for Recorder {
    fn observe(&mut self, info: &StepInfo<'_>) {
        self.times.push(info.t);
        self.states.extend_from_slice(info.x);
    }
}

/// Euler–Maruyama directly on the coefficients:
/// `X_{n+1} = X_n + mu(X_n) dt + sigma(X_n) dW_n`.
pub fn euler_maruyama(
    field: &CoefficientField,
    x0: &[f64],
    cfg: &SimConfig,
    path_index: u64,
) -> Result<Trajectory> {
    let mut cfg = cfg.clone();
    cfg.scheme = Scheme::Direct;
    record_path(field, x0, &cfg, path_index)
}

/// Simulation through the transform: evolve `Z` by Euler–Maruyama on the
/// transformed coefficients, map back through `H` each step, hop charts
/// near the validity edge.
pub fn simulate_via_transform(
    field: &CoefficientField,
    x0: &[f64],
    cfg: &SimConfig,
    path_index: u64,
) -> Result<Trajectory> {
    let mut cfg = cfg.clone();
    cfg.scheme = Scheme::Transformed;
    record_path(field, x0, &cfg, path_index)
}

fn record_path(
    field: &CoefficientField,
    x0: &[f64],
    cfg: &SimConfig,
    path_index: u64,
) -> Result<Trajectory> {
    let mut runner = PathRunner::new(field, cfg)?;
    let mut rec = Recorder {
        dim: field.dim(),
        times: Vec::with_capacity(cfg.n_steps() + 1),
        states: Vec::with_capacity((cfg.n_steps() + 1) * field.dim()),
    };
    let outcome = runner.run_with(x0, path_index, &mut rec)?;
    Ok(Trajectory {
        dim: rec.dim,
        times: rec.times,
        states: rec.states,
        termination: outcome.termination,
        chart_rebuilds: outcome.chart_rebuilds,
        seed_used: cfg.base_seed,
        path_index,
    })
}

/// Monte Carlo summary of a scalar functional of the terminal state.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct McSummary {
    pub estimate: f64,
    pub std_error: f64,
    /// Paths that reached the horizon and entered the estimate.
    pub n_effective: usize,
    pub n_paths: usize,
    pub n_rebuilds_total: usize,
    pub terminations: BTreeMap<String, usize>,
}

/// Reduces per-path functional values and terminations into a summary.
/// Deterministic: values are accumulated in path order.
pub fn summarize(
    phi_values: &[Option<f64>],
    terminations: &[Termination],
    n_rebuilds_total: usize,
) -> Result<McSummary> {
    let n_paths = phi_values.len();
    let mut sum = 0.0;
    let mut n_eff = 0usize;
    for v in phi_values.iter().flatten() {
        sum += v;
        n_eff += 1;
    }
    if n_eff == 0 {
        return Err(Error::Estimation(String::from(
            "no path reached the horizon",
        )));
    }
    let mean = sum / n_eff as f64;
    let mut ss = 0.0;
    for v in phi_values.iter().flatten() {
        ss += (v - mean) * (v - mean);
    }
    let std_error = if n_eff > 1 {
        math::sqrt(ss / ((n_eff - 1) as f64 * n_eff as f64))
    } else {
        f64::INFINITY
    };
    let mut term_map = BTreeMap::new();
    for t in terminations {
        *term_map.entry(t.as_str().to_string()).or_insert(0) += 1;
    }
    Ok(McSummary {
        estimate: mean,
        std_error,
        n_effective: n_eff,
        n_paths,
        n_rebuilds_total,
        terminations: term_map,
    })
}

/// Sequential Monte Carlo over `cfg.n_paths` independent paths: sample
/// mean and standard error of `phi` at the horizon. Paths stopped by the
/// explosion guard are excluded from the estimate but counted in the
/// termination breakdown.
pub fn monte_carlo<F: Fn(&[f64]) -> f64>(
    field: &CoefficientField,
    x0: &[f64],
    cfg: &SimConfig,
    phi: F,
) -> Result<McSummary> {
    if cfg.n_paths < 2 {
        return Err(Error::Input(String::from("n_paths must be at least 2")));
    }
    let mut runner = PathRunner::new(field, cfg)?;
    let mut values = Vec::with_capacity(cfg.n_paths);
    let mut terms = Vec::with_capacity(cfg.n_paths);
    let mut rebuilds = 0usize;
    for p in 0..cfg.n_paths {
        let outcome = runner.run(x0, p as u64)?;
        rebuilds += outcome.chart_rebuilds;
        terms.push(outcome.termination);
        values.push(match outcome.termination {
            Termination::Horizon => Some(phi(&outcome.terminal)),
            _ => None,
        });
    }
    summarize(&values, &terms, rebuilds)
}

/// Sign convention for `sgn(0)` in the deterministic counterexample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SignZero {
    /// The mathematical convention `sgn(0) = 0`.
    #[default]
    Zero,
    Plus,
    Minus,
}

impl SignZero {
    fn apply(&self, x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            match self {
                SignZero::Zero => 0.0,
                SignZero::Plus => 1.0,
                SignZero::Minus => -1.0,
            }
        }
    }
}

/// Deterministic Euler iteration of `x' = 1/2 - sgn(x)` from 0: the
/// discrete system of the no-solution example. With `sgn(0) = 0` the
/// iterates alternate exactly between 0 and `h/2`, collapsing with the
/// grid — the discrete shadow of the fact that no macroscopic solution
/// exists.
pub fn counterexample_run(h: f64, horizon: f64, sgn0: SignZero) -> Trajectory {
    let grid = SimConfig {
        step: h,
        horizon,
        ..SimConfig::default()
    };
    let n_steps = grid.n_steps();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = 0.0f64;
    let mut t = 0.0f64;
    times.push(0.0);
    states.push(x);
    for n in 0..n_steps {
        let dt = grid.dt(n);
        x += dt * (0.5 - sgn0.apply(x));
        t += dt;
        times.push(t);
        states.push(x);
    }
    Trajectory {
        dim: 1,
        times,
        states,
        termination: Termination::Horizon,
        chart_rebuilds: 0,
        seed_used: 0,
        path_index: 0,
    }
}
