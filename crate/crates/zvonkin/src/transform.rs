//! The drift-removing local transformation.
//!
//! For an SDE whose drift jumps across `{x1 = 0}`, define
//!
//! ```text
//! G(x) = (g1(x), x2 + g2(x), ..., xd + gd(x))
//! ```
//!
//! where `g1` kills the discontinuous first drift component (its ODE is
//! `mu_1 g1' + 1/2 A g1'' = 0` with `A = (sigma sigma^T)_11`) and each
//! `g_k` cancels the jump of `mu_k` via a variation-of-constants factor
//! `C_k`. Then `Z = G(X)` satisfies an SDE with locally Lipschitz
//! coefficients, and `X = H(Z)` with `H` the local Newton inverse of `G`.
//!
//! `G` is only locally invertible, so a [`TransformChart`] carries a
//! certified radius: the smallest singular value of the gradient is
//! checked on a shell grid, shrinking the radius geometrically until the
//! bound holds. A [`ChartAtlas`] memoises charts at lattice-snapped
//! centres so that path simulation can hop charts cheaply.

mod cache;

pub use cache::{Bundle, RestWeights, XiCache};

use crate::cheb::DerivLevel;
use crate::field::{CoefficientField, Half};
use crate::linalg;
use crate::math;
use crate::rng::NoiseStream;
use crate::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Numerical knobs of the transform construction.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tolerances {
    /// Absolute tolerance per cached integral.
    pub quad_tol: f64,
    /// Residual tolerance of the Newton inversion of `G`.
    pub newton_tol: f64,
    pub newton_max: usize,
    /// Lower bound certified for the smallest singular value of `grad G`.
    pub delta_inv: f64,
    /// Geometric radius shrink factor between certification attempts.
    pub shrink: f64,
    pub max_shrinks: usize,
    /// Chebyshev nodes per rest dimension; 0 picks automatically by
    /// refining until the cache passes its fidelity spot checks.
    pub rest_nodes: usize,
    /// When false the radius is used as given and certification failure is
    /// an error instead of triggering a shrink.
    pub allow_shrink: bool,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            quad_tol: 1e-10,
            newton_tol: 1e-12,
            newton_max: 50,
            delta_inv: 1e-3,
            shrink: 0.7,
            max_shrinks: 40,
            rest_nodes: 0,
            allow_shrink: true,
        }
    }
}

/// Outcome of a cache fidelity sweep.
enum Fidelity {
    Ok,
    /// The cumulative xi grids miss the budget (refine cells).
    XiCoarse(f64),
    /// Interpolation across rest nodes misses the budget (more nodes).
    RestCoarse(f64),
}

/// Reusable per-worker evaluation buffers (one per thread; charts
/// themselves stay immutable and shared).
#[derive(Debug, Clone)]
pub struct ChartScratch {
    rw: RestWeights,
    bundle: Bundle,
    jac: Vec<f64>,
    rhs: Vec<f64>,
    mu: Vec<f64>,
    sig: Vec<f64>,
    best: Vec<f64>,
    step: Vec<f64>,
    piv: Vec<usize>,
}

impl ChartScratch {
    /// Drift of the governing half at the `x` of the last
    /// `coeffs_at_with` call (lets the path engine build its Euler
    /// predictor without re-evaluating the coefficients).
    pub fn last_mu(&self) -> &[f64] {
        &self.mu
    }

    /// Diffusion matrix at the `x` of the last `coeffs_at_with` call.
    pub fn last_sigma(&self) -> &[f64] {
        &self.sig
    }
}

/// A locally valid `(G, H)` pair: frozen quadrature caches around a centre
/// point with a certified invertibility radius.
#[derive(Clone)]
pub struct TransformChart {
    field: CoefficientField,
    center: Vec<f64>,
    radius: f64,
    tol: Tolerances,
    cache: XiCache,
}

impl core::fmt::Debug for TransformChart {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("TransformChart")
            .field("center", &self.center)
            .field("radius", &self.radius)
            .field("rest_nodes", &self.cache.rest_grids.first().map(|g| g.len()))
            .finish()
    }
}

impl TransformChart {
    /// Builds and certifies a chart at `center`.
    ///
    /// The cache is built, spot-checked against direct adaptive quadrature,
    /// and the gradient's smallest singular value is sampled on a shell
    /// grid of `32 d` points per radius; on failure the radius shrinks
    /// geometrically until certification succeeds or attempts run out.
    pub fn build(
        field: &CoefficientField,
        center: &[f64],
        r_hint: f64,
        tol: &Tolerances,
    ) -> Result<Self> {
        if !field.is_hyperplane_form() {
            return Err(Error::Input(String::from(
                "transform charts need the discontinuity on {x1 = 0}; lift the surface first",
            )));
        }
        if center.len() != field.dim() {
            return Err(Error::Input(format!(
                "centre has dimension {}, field expects {}",
                center.len(),
                field.dim()
            )));
        }
        if !(r_hint > 0.0) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(String::from("radius and centre must be finite")));
        }

        let mut radius = r_hint;
        let mut last_err = String::new();
        let attempts = if tol.allow_shrink { tol.max_shrinks } else { 0 };
        for _ in 0..=attempts {
            match Self::try_build(field, center, radius, tol) {
                Ok(chart) => return Ok(chart),
                Err(Error::ChartBuild(m)) | Err(Error::Quadrature(m)) => {
                    last_err = m;
                    radius *= tol.shrink;
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::ChartBuild(format!(
            "no certified radius at centre {center:?} down from {r_hint} \
             (last failure: {last_err})"
        )))
    }

    fn try_build(
        field: &CoefficientField,
        center: &[f64],
        radius: f64,
        tol: &Tolerances,
    ) -> Result<Self> {
        let node_ladder: &[usize] = &[9, 13, 17, 25, 33];
        let ladder: Vec<usize> = if tol.rest_nodes > 0 {
            vec![tol.rest_nodes]
        } else {
            node_ladder.to_vec()
        };
        let mut cells_hint = 0;
        let mut ladder_pos = 0;
        let mut chart = None;
        for _refine in 0..8 {
            let rest_nodes = ladder[ladder_pos.min(ladder.len() - 1)];
            let cache = XiCache::build(field, center, radius, tol.quad_tol, rest_nodes, cells_hint)?;
            let candidate = TransformChart {
                field: field.clone(),
                center: center.to_vec(),
                radius,
                tol: tol.clone(),
                cache,
            };
            match candidate.fidelity_check()? {
                Fidelity::Ok => {
                    chart = Some(candidate);
                    break;
                }
                Fidelity::XiCoarse(err) => {
                    // the cumulative grids themselves miss the budget:
                    // refine the xi cells, keep the rest nodes
                    let current = candidate.cache.n_plus.max(candidate.cache.n_minus).max(8);
                    if current >= 8192 {
                        return Err(Error::ChartBuild(format!(
                            "xi-grid fidelity {err:.3e} not reached at 8192 cells"
                        )));
                    }
                    cells_hint = (current * 2).clamp(16, 8192);
                }
                Fidelity::RestCoarse(err) => {
                    // interpolation across the rest nodes misses the
                    // budget: climb the Chebyshev ladder
                    if ladder_pos + 1 >= ladder.len() {
                        return Err(Error::ChartBuild(format!(
                            "rest-node fidelity {err:.3e} not reached at {} nodes",
                            ladder[ladder_pos]
                        )));
                    }
                    ladder_pos += 1;
                }
            }
        }
        let chart = chart.ok_or_else(|| {
            Error::ChartBuild(String::from("cache fidelity not reached after refinement"))
        })?;
        chart.certify_invertibility()?;
        Ok(chart)
    }

    fn fidelity_at(&self, x1: f64, rest: &[f64], full: bool) -> Result<f64> {
        let anchor = self.cache.anchor;
        let mut worst = 0.0f64;
        let i_direct = oracle::inner_exponent(&self.field, anchor, x1, rest, self.tol.quad_tol)?;
        let i_cached = self.inner_exponent(x1, rest)?;
        worst = worst.max(math::abs(i_direct - i_cached));
        let g1_direct = oracle::g1(&self.field, anchor, x1, rest, self.tol.quad_tol)?;
        let mut x = alloc::vec::Vec::with_capacity(rest.len() + 1);
        x.push(x1);
        x.extend_from_slice(rest);
        let g1_cached = self.g1(&x)?;
        worst = worst.max(math::abs(g1_direct - g1_cached));
        if full && self.dim() >= 2 {
            let c_direct = oracle::ck(&self.field, anchor, 2, x1, rest, self.tol.quad_tol)?;
            let c_cached = self.ck(2, x1, rest)?;
            worst = worst.max(math::abs(c_direct - c_cached));
            let g_direct = oracle::gk(&self.field, anchor, 2, x1, rest, self.tol.quad_tol)?;
            let g_cached = self.gk(2, &x)?;
            worst = worst.max(math::abs(g_direct - g_cached));
        }
        Ok(worst)
    }

    /// Compares cached values against direct adaptive quadrature, first
    /// with the rest coordinates pinned to tensor nodes (pure xi-grid
    /// error), then at off-node points (adds the rest interpolation),
    /// so refinement can target the coarse direction.
    fn fidelity_check(&self) -> Result<Fidelity> {
        let d = self.field.dim();
        let budget = 100.0 * self.tol.quad_tol + 1e-12;
        let stream = NoiseStream::new(0x5eed_cafe, 1);

        // on-node sweep
        let mut rest = vec![0.0; d - 1];
        self.cache.rest_coords(self.cache.n_rest / 2, &mut rest);
        let mut worst_xi = 0.0f64;
        for s in 0..4u64 {
            let u = stream.uniform(s, 0);
            let x1 = self.center[0] + (2.0 * u - 1.0) * self.radius;
            worst_xi = worst_xi.max(self.fidelity_at(x1, &rest, s == 0)?);
        }
        if worst_xi > budget {
            return Ok(Fidelity::XiCoarse(worst_xi));
        }

        // off-node sweep
        let mut worst = 0.0f64;
        for s in 4..10u64 {
            let mut x = vec![0.0; d];
            for (i, xi) in x.iter_mut().enumerate() {
                let u = stream.uniform(s, i as u64);
                *xi = self.center[i] + (2.0 * u - 1.0) * self.radius / (d as f64).max(1.0);
            }
            worst = worst.max(self.fidelity_at(x[0], &x[1..], s < 6)?);
        }
        if worst > budget {
            return Ok(Fidelity::RestCoarse(worst));
        }
        Ok(Fidelity::Ok)
    }

    /// Smallest singular value of `grad G` on a shell grid plus interior
    /// samples must stay at or above `delta_inv`; the gradient at the
    /// hyperplane must be the identity.
    fn certify_invertibility(&self) -> Result<()> {
        let d = self.field.dim();
        let stream = NoiseStream::new(0xD1CE, 2);
        let n_shell = 32 * d;
        let mut scratch = self.scratch();
        let mut x = vec![0.0; d];
        let mut worst_sv = f64::INFINITY;
        for s in 0..(n_shell + 16) as u64 {
            // first the shell at full radius, then interior points
            let scale = if (s as usize) < n_shell {
                1.0
            } else {
                0.3 + 0.6 * stream.uniform(s, 7)
            };
            let mut norm2 = 0.0;
            for i in 0..d {
                let (z0, _) = stream.normal_pair(s, i as u64);
                x[i] = z0;
                norm2 += z0 * z0;
            }
            let norm = math::sqrt(norm2).max(1e-12);
            for i in 0..d {
                x[i] = self.center[i] + x[i] / norm * self.radius * scale;
            }
            let grad = self.grad_g_with(&x, &mut scratch);
            let sv = linalg::min_singular_value(&grad, d);
            worst_sv = worst_sv.min(sv);
            if sv < self.tol.delta_inv {
                return Err(Error::ChartBuild(format!(
                    "smallest singular value {sv:.3e} below {:.1e} at radius {}",
                    self.tol.delta_inv, self.radius
                )));
            }
        }
        // gradient at the hyperplane: identity by construction (only
        // meaningful when the interface crosses the chart)
        if self.cache.anchor == 0.0 && self.cache.n_minus > 0 && self.cache.n_plus > 0 {
            for s in 0..4u64 {
                for i in 1..d {
                    x[i] = self.center[i] + (2.0 * stream.uniform(100 + s, i as u64) - 1.0)
                        * self.radius
                        / (d as f64);
                }
                x[0] = 0.0;
                let grad = self.grad_g_with(&x, &mut scratch);
                for r in 0..d {
                    for c in 0..d {
                        let want = if r == c { 1.0 } else { 0.0 };
                        let got = grad[r * d + c];
                        if math::abs(got - want) > 1e-8 {
                            return Err(Error::ChartBuild(format!(
                                "grad G(0, .) entry ({r},{c}) = {got:.3e} is not identity"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Where the cumulative integrals start: 0 when the interface crosses
    /// the chart, the chart centre otherwise (the integration constants of
    /// the defining ODEs are free, and a local anchor keeps the exponent
    /// bounded on interface-free charts).
    pub fn anchor(&self) -> f64 {
        self.cache.anchor
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn scratch(&self) -> ChartScratch {
        let d = self.dim();
        ChartScratch {
            rw: RestWeights::default(),
            bundle: Bundle::default(),
            jac: vec![0.0; d * d],
            rhs: vec![0.0; d],
            mu: vec![0.0; d],
            sig: vec![0.0; d * d],
            best: vec![0.0; d],
            step: vec![0.0; d],
            piv: vec![0; d],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        math::dist(x, &self.center) <= self.radius * (1.0 + 1e-9)
    }

    fn check_inside(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Input(format!(
                "point dimension {} does not match chart dimension {}",
                x.len(),
                self.dim()
            )));
        }
        // allow up to the cache margin so shell evaluations stay valid
        if math::dist(x, &self.center) > self.radius * 1.05 + 1e-12 {
            return Err(Error::ChartBuild(format!(
                "point {x:?} outside chart at {:?} radius {}",
                self.center, self.radius
            )));
        }
        Ok(())
    }

    fn boundary_half(&self) -> Half {
        match self.field.boundary() {
            crate::field::BoundarySide::Plus => Half::Plus,
            crate::field::BoundarySide::Minus => Half::Minus,
        }
    }

    /// `I(x1; x_rest) = int_anchor^x1 2 mu_1 / A`, from the cache.
    pub fn inner_exponent(&self, x1: f64, x_rest: &[f64]) -> Result<f64> {
        let rw = self.cache.rest_weights(x_rest, DerivLevel::Value);
        let b = self.cache.bundle(x1, self.boundary_half(), &rw, DerivLevel::Value);
        Ok(b.i)
    }

    /// `g1(x) = int_0^x1 exp(-I)`: strictly increasing in `x1`, zero on the
    /// hyperplane.
    pub fn g1(&self, x: &[f64]) -> Result<f64> {
        let rw = self.cache.rest_weights(&x[1..], DerivLevel::Value);
        let b = self.cache.bundle(x[0], self.boundary_half(), &rw, DerivLevel::Value);
        Ok(b.g[0])
    }

    /// Variation-of-constants factor `C_k`, k in 2..=d.
    pub fn ck(&self, k: usize, xi: f64, x_rest: &[f64]) -> Result<f64> {
        self.check_k(k)?;
        let rw = self.cache.rest_weights(x_rest, DerivLevel::Value);
        let b = self.cache.bundle(xi, self.boundary_half(), &rw, DerivLevel::Value);
        Ok(b.c[k - 2])
    }

    /// `g_k(x) = int_0^x1 C_k exp(-I)`, k in 2..=d.
    pub fn gk(&self, k: usize, x: &[f64]) -> Result<f64> {
        self.check_k(k)?;
        let rw = self.cache.rest_weights(&x[1..], DerivLevel::Value);
        let b = self.cache.bundle(x[0], self.boundary_half(), &rw, DerivLevel::Value);
        Ok(b.g[k - 1])
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k < 2 || k > self.dim() {
            return Err(Error::Input(format!("k = {k} out of range 2..={}", self.dim())));
        }
        Ok(())
    }

    /// `G(x) = (g1, x2 + g2, ..., xd + gd)`.
    pub fn apply_g(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_inside(x)?;
        let mut out = vec![0.0; self.dim()];
        let mut scratch = self.scratch();
        self.apply_g_with(x, &mut scratch, &mut out);
        Ok(out)
    }

    /// Unchecked `G` evaluation into a buffer (hot path).
    pub fn apply_g_with(&self, x: &[f64], s: &mut ChartScratch, out: &mut [f64]) {
        self.cache.rest_weights_into(&x[1..], DerivLevel::Value, &mut s.rw);
        self.cache
            .bundle_into(x[0], self.boundary_half(), &s.rw, DerivLevel::Value, &mut s.bundle);
        out[0] = s.bundle.g[0];
        for k in 2..=self.dim() {
            out[k - 1] = x[k - 1] + s.bundle.g[k - 1];
        }
    }

    /// Newton inverse `H(z)`, cold-started at `z` clipped into the chart
    /// ball.
    pub fn apply_h(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut guess = z.to_vec();
        let dist = math::dist(&guess, &self.center);
        if dist > self.radius {
            let f = self.radius / dist;
            for i in 0..guess.len() {
                guess[i] = self.center[i] + (guess[i] - self.center[i]) * f;
            }
        }
        let mut out = vec![0.0; self.dim()];
        let mut scratch = self.scratch();
        self.apply_h_from(z, &guess, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Newton inverse with an explicit initial guess (the path engine
    /// passes an Euler predictor, which leaves only 2-3 iterations).
    ///
    /// A step that increases the residual is halved (up to 8 times) from
    /// the last accepted iterate before the solve is declared stalled.
    /// Allocation-free: one Grad-level bundle per trial point.
    pub fn apply_h_from(
        &self,
        z: &[f64],
        guess: &[f64],
        s: &mut ChartScratch,
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.dim();
        out.copy_from_slice(guess);
        let mut prev_norm = f64::INFINITY;
        let mut have_base = false;
        let mut have_jac = false;
        let mut lambda = 1.0;
        let mut halvings = 0u32;
        let mut full_steps = 0usize;
        loop {
            // Residuals only need G values; the Jacobian is refreshed
            // lazily (chord iteration), since good predictors leave it
            // nearly constant between the 2-3 iterations taken.
            let level = if have_jac {
                DerivLevel::Value
            } else {
                DerivLevel::Grad
            };
            self.cache.rest_weights_into(&out[1..], level, &mut s.rw);
            self.cache
                .bundle_into(out[0], self.boundary_half(), &s.rw, level, &mut s.bundle);
            if !have_jac {
                self.fill_grad(&s.bundle, &mut s.jac);
                if !linalg::factor_in_place(&mut s.jac, &mut s.piv, d) {
                    return Err(Error::Inversion(format!(
                        "singular gradient during inversion at {out:?}"
                    )));
                }
                have_jac = true;
            }
            // rhs = G(out) - z
            s.rhs[0] = s.bundle.g[0] - z[0];
            for k in 2..=d {
                s.rhs[k - 1] = out[k - 1] + s.bundle.g[k - 1] - z[k - 1];
            }
            let rnorm = math::norm(&s.rhs);
            if !rnorm.is_finite() {
                return Err(Error::Inversion(format!("non-finite residual at {out:?}")));
            }
            if rnorm <= self.tol.newton_tol {
                return Ok(());
            }
            if have_base && rnorm >= prev_norm {
                // the last step made things worse: halve from the
                // accepted base, with a fresh Jacobian at the next point
                halvings += 1;
                if halvings > 9 {
                    return Err(Error::Inversion(format!(
                        "Newton stalled at residual {prev_norm:.3e} (target {:.1e})",
                        self.tol.newton_tol
                    )));
                }
                lambda *= 0.5;
                for i in 0..d {
                    out[i] = s.best[i] - lambda * s.step[i];
                }
                have_jac = false;
                continue;
            }
            if full_steps >= self.tol.newton_max {
                return Err(Error::Inversion(format!(
                    "Newton iteration cap {} reached (residual {rnorm:.3e})",
                    self.tol.newton_max
                )));
            }
            // accept this point as the new base and take a full step
            s.step.copy_from_slice(&s.rhs);
            linalg::solve_factored(&s.jac, &s.piv, &mut s.step, d);
            if !s.step.iter().all(|v| v.is_finite()) {
                return Err(Error::Inversion(format!(
                    "non-finite Newton step at {out:?}"
                )));
            }
            s.best.copy_from_slice(out);
            prev_norm = rnorm;
            lambda = 1.0;
            halvings = 0;
            have_base = true;
            full_steps += 1;
            for i in 0..d {
                out[i] -= s.step[i];
            }
        }
    }

    /// `grad G(x)`, row-major d x d.
    pub fn grad_g(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_inside(x)?;
        let mut s = self.scratch();
        Ok(self.grad_g_with(x, &mut s))
    }

    fn grad_g_with(&self, x: &[f64], s: &mut ChartScratch) -> Vec<f64> {
        let d = self.dim();
        self.cache.rest_weights_into(&x[1..], DerivLevel::Grad, &mut s.rw);
        self.cache.bundle_into(
            x[0],
            self.boundary_half(),
            &s.rw,
            DerivLevel::Grad,
            &mut s.bundle,
        );
        let mut jac = vec![0.0; d * d];
        self.fill_grad(&s.bundle, &mut jac);
        jac
    }

    /// Writes `grad G` from a Grad-level bundle: row k is
    /// `e_k (k>=2) + (dg_k/dx1, dg_k/dx_rest)`.
    fn fill_grad(&self, b: &Bundle, jac: &mut [f64]) {
        let d = self.dim();
        for k in 1..=d {
            jac[(k - 1) * d] = b.dg_dxi(k);
            for i in 1..d {
                let mut v = b.dg_rest[k - 1][i - 1];
                if k - 1 == i {
                    v += 1.0;
                }
                jac[(k - 1) * d + i] = v;
            }
        }
    }

    /// Hessian of `G_k` (equivalently of `g_k`), row-major d x d.
    ///
    /// The `(1,1)` entry substitutes the defining ODE,
    /// `g1'' = -(2 mu_1/A) g1'` and `g_k'' = -(2/A)(mu_k + mu_1 g_k')`,
    /// evaluated with the coefficient closures at `x` (one-sided on the
    /// hyperplane per the boundary convention). This is what makes the
    /// transformed drift jump cancel identically.
    pub fn hess_g(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        if k < 1 || k > self.dim() {
            return Err(Error::Input(format!("k = {k} out of range 1..={}", self.dim())));
        }
        self.check_inside(x)?;
        let d = self.dim();
        let mut s = self.scratch();
        self.cache.rest_weights_into(&x[1..], DerivLevel::Hess, &mut s.rw);
        self.cache.bundle_into(
            x[0],
            self.boundary_half(),
            &s.rw,
            DerivLevel::Hess,
            &mut s.bundle,
        );
        let half = self.field.half_at(x);
        self.field.drift_half_into(half, x, &mut s.mu);
        let a11 = self.field.a11_with(x, &mut s.sig);
        let mut h = vec![0.0; d * d];
        self.fill_hess(k, &s.bundle, &s.mu, a11, &mut h);
        Ok(h)
    }

    fn fill_hess(&self, k: usize, b: &Bundle, mu: &[f64], a11: f64, h: &mut [f64]) {
        let d = self.dim();
        let dg1 = b.dg_dxi(k);
        h[0] = if k == 1 {
            -(2.0 * mu[0] / a11) * dg1
        } else {
            -(2.0 / a11) * (mu[k - 1] + mu[0] * dg1)
        };
        for i in 1..d {
            let v = b.dg_dxi_rest(k, i - 1);
            h[i] = v;
            h[i * d] = v;
        }
        let n_rest = d - 1;
        for i in 1..d {
            for j in i..d {
                let v = b.dg_rest2[k - 1][RestWeights::pair_index(n_rest, i - 1, j - 1)];
                h[i * d + j] = v;
                h[j * d + i] = v;
            }
        }
    }

    /// Cache-route second xi-derivative of `g_k`: differentiates the
    /// cached profiles rather than substituting the ODE, so diagnostics
    /// can measure the ODE residual of the cache honestly.
    pub fn d2g_dxi2_cached(&self, k: usize, x: &[f64]) -> Result<f64> {
        if k < 1 || k > self.dim() {
            return Err(Error::Input(format!("k = {k} out of range 1..={}", self.dim())));
        }
        let rw = self.cache.rest_weights(&x[1..], DerivLevel::Value);
        let b = self.cache.bundle(x[0], self.boundary_half(), &rw, DerivLevel::Value);
        Ok(b.d2g_dxi2_cached(k))
    }

    /// First xi-derivative of `g_k` in the product convention.
    pub fn dg_dxi(&self, k: usize, x: &[f64]) -> Result<f64> {
        if k < 1 || k > self.dim() {
            return Err(Error::Input(format!("k = {k} out of range 1..={}", self.dim())));
        }
        let rw = self.cache.rest_weights(&x[1..], DerivLevel::Value);
        let b = self.cache.bundle(x[0], self.boundary_half(), &rw, DerivLevel::Value);
        Ok(b.dg_dxi(k))
    }

    /// Transformed coefficients at a point `z` of the image:
    /// `mu~_k = grad G_k . mu + 1/2 tr(sigma^T hess G_k sigma)` and
    /// `sigma~ = grad G sigma`, all evaluated at `x = H(z)`.
    pub fn transformed_coefficients(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.apply_h(z)?;
        let d = self.dim();
        let mut s = self.scratch();
        let mut mu_t = vec![0.0; d];
        let mut sig_t = vec![0.0; d * d];
        self.coeffs_at_with(&x, &mut s, &mut mu_t, &mut sig_t)?;
        Ok((mu_t, sig_t))
    }

    /// Transformed drift and diffusion evaluated at a known pre-image `x`
    /// (the path engine always has `x = H(z)` from the previous map-back,
    /// so it never inverts twice).
    pub fn coeffs_at_with(
        &self,
        x: &[f64],
        s: &mut ChartScratch,
        mu_t: &mut [f64],
        sig_t: &mut [f64],
    ) -> Result<()> {
        let d = self.dim();
        self.cache.rest_weights_into(&x[1..], DerivLevel::Hess, &mut s.rw);
        self.cache.bundle_into(
            x[0],
            self.boundary_half(),
            &s.rw,
            DerivLevel::Hess,
            &mut s.bundle,
        );
        let half = self.field.half_at(x);
        self.field.drift_half_into(half, x, &mut s.mu);
        self.field.diffusion_into(x, &mut s.sig);
        let a11: f64 = s.sig[..d].iter().map(|v| v * v).sum();
        if !(a11 > 0.0) {
            return Err(Error::Numeric {
                step: 0,
                message: format!("(sigma sigma^T)_11 = {a11} not positive at {x:?}"),
            });
        }

        self.fill_grad(&s.bundle, &mut s.jac);
        // sigma~ = grad G sigma
        for r in 0..d {
            for c in 0..d {
                let mut v = 0.0;
                for m in 0..d {
                    v += s.jac[r * d + m] * s.sig[m * d + c];
                }
                sig_t[r * d + c] = v;
            }
        }
        // mu~_k = row_k(grad G) . mu + 1/2 sum_j col_j(sigma)^T H_k col_j(sigma)
        let n_rest = d - 1;
        for k in 1..=d {
            let mut v = math::dot(&s.jac[(k - 1) * d..k * d], &s.mu);
            let dgk = s.bundle.dg_dxi(k);
            let h11 = if k == 1 {
                -(2.0 * s.mu[0] / a11) * dgk
            } else {
                -(2.0 / a11) * (s.mu[k - 1] + s.mu[0] * dgk)
            };
            for j in 0..d {
                // column j of sigma
                let s1 = s.sig[j];
                let mut quad = s1 * s1 * h11;
                for i in 1..d {
                    let si = s.sig[i * d + j];
                    let h1i = s.bundle.dg_dxi_rest(k, i - 1);
                    quad += 2.0 * s1 * si * h1i;
                    for l in 1..d {
                        let slv = s.sig[l * d + j];
                        let (lo, hi) = if i <= l { (i, l) } else { (l, i) };
                        let hil = s.bundle.dg_rest2[k - 1]
                            [RestWeights::pair_index(n_rest, lo - 1, hi - 1)];
                        quad += si * slv * hil;
                    }
                }
                v += 0.5 * quad;
            }
            mu_t[k - 1] = v;
        }
        Ok(())
    }

    #[cfg(feature = "serde")]
    pub fn to_dump(&self) -> ChartDump {
        ChartDump {
            center: self.center.clone(),
            radius: self.radius,
            tolerances: self.tol.clone(),
            cache: self.cache.clone(),
        }
    }

    /// Restores a chart from a dump; the coefficient field is supplied by
    /// the caller (closures cannot be serialized).
    #[cfg(feature = "serde")]
    pub fn from_dump(dump: ChartDump, field: &CoefficientField) -> Result<Self> {
        if dump.cache.dim != field.dim() {
            return Err(Error::Input(format!(
                "dump dimension {} does not match field dimension {}",
                dump.cache.dim,
                field.dim()
            )));
        }
        Ok(TransformChart {
            field: field.clone(),
            center: dump.center,
            radius: dump.radius,
            tol: dump.tolerances,
            cache: dump.cache,
        })
    }
}

/// Serializable image of a chart: centre, radius, tolerances and the full
/// frozen caches, sufficient to reproduce reported diagnostics.
#[cfg(feature = "serde")]
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChartDump {
    pub center: Vec<f64>,
    pub radius: f64,
    pub tolerances: Tolerances,
    pub cache: XiCache,
}

/// Memoised charts at lattice-snapped centres.
///
/// Paths hop charts as they move; snapping centres to a lattice keyed by
/// `spacing` makes every worker rebuild the *same* charts, so results do
/// not depend on scheduling and the build cost is paid once per region.
/// Chart contents depend only on the snapped centre, never on which
/// worker or seed triggered the build, so atlases can be cloned across
/// workers (cheap: charts are shared through `Arc`) and merged back.
#[derive(Clone)]
pub struct ChartAtlas {
    field: CoefficientField,
    tol: Tolerances,
    r_hint: f64,
    spacing: f64,
    charts: BTreeMap<Vec<i64>, Arc<TransformChart>>,
    /// Beyond this many cached charts, new ones are built ephemerally.
    pub capacity: usize,
    pub builds: usize,
}

impl ChartAtlas {
    pub fn new(field: &CoefficientField, r_hint: f64, tol: &Tolerances) -> Self {
        ChartAtlas {
            field: field.clone(),
            tol: tol.clone(),
            r_hint,
            spacing: 0.5 * r_hint,
            charts: BTreeMap::new(),
            capacity: 256,
            builds: 0,
        }
    }

    fn key(&self, x: &[f64], spacing: f64) -> Vec<i64> {
        x.iter().map(|&v| math::round(v / spacing) as i64).collect()
    }

    fn snapped_center(&self, x: &[f64], spacing: f64) -> Vec<f64> {
        x.iter().map(|&v| math::round(v / spacing) * spacing).collect()
    }

    /// A chart that covers `x` with room to move (distance to centre at
    /// most 60% of the certified radius), built on demand.
    pub fn chart_for(&mut self, x: &[f64]) -> Result<Arc<TransformChart>> {
        let mut spacing = self.spacing;
        for _ in 0..3 {
            let key = self.key(x, spacing);
            if let Some(chart) = self.charts.get(&key) {
                if math::dist(x, chart.center()) <= 0.6 * chart.radius() {
                    return Ok(chart.clone());
                }
            } else {
                let center = self.snapped_center(x, spacing);
                let chart = Arc::new(TransformChart::build(
                    &self.field,
                    &center,
                    self.r_hint,
                    &self.tol,
                )?);
                self.builds += 1;
                if self.charts.len() < self.capacity {
                    self.charts.insert(key, chart.clone());
                }
                if math::dist(x, chart.center()) <= 0.6 * chart.radius() {
                    return Ok(chart);
                }
            }
            // certified radius came out too small for this lattice; retry
            // with a finer snap so the centre moves closer to x
            spacing *= 0.25;
        }
        self.builds += 1;
        Ok(Arc::new(TransformChart::build(
            &self.field,
            x,
            self.r_hint,
            &self.tol,
        )?))
    }

    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    /// Adopts charts built by another atlas of the same field (keys that
    /// already exist are kept).
    pub fn merge(&mut self, other: &ChartAtlas) {
        for (k, v) in &other.charts {
            if self.charts.len() >= self.capacity {
                break;
            }
            self.charts.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
}

/// Direct adaptive-quadrature evaluation of the transform integrals,
/// independent of the chart caches. Slow (nested quadrature) but exact up
/// to tolerance: the reference the caches are certified against, and the
/// oracle route for the tests. `anchor` is where the cumulative integrals
/// start (0 for interface charts).
pub mod oracle {
    use super::*;

    fn ratio(field: &CoefficientField, k: usize, xi: f64, rest: &[f64]) -> f64 {
        let d = field.dim();
        let mut point = vec![0.0; d];
        point[0] = xi;
        point[1..].copy_from_slice(rest);
        let mut sig = vec![0.0; d * d];
        field.diffusion_into(&point, &mut sig);
        let a11: f64 = sig[..d].iter().map(|v| v * v).sum();
        let half = if xi > 0.0 {
            Half::Plus
        } else if xi < 0.0 {
            Half::Minus
        } else {
            match field.boundary() {
                crate::field::BoundarySide::Plus => Half::Plus,
                crate::field::BoundarySide::Minus => Half::Minus,
            }
        };
        let mut mu = vec![0.0; d];
        field.drift_half_into(half, &point, &mut mu);
        2.0 * mu[k - 1] / a11
    }

    pub fn inner_exponent(
        field: &CoefficientField,
        anchor: f64,
        x1: f64,
        rest: &[f64],
        tol: f64,
    ) -> Result<f64> {
        crate::quad::integrate_split_at_zero(&|xi| ratio(field, 1, xi, rest), anchor, x1, tol)
    }

    pub fn ck(
        field: &CoefficientField,
        anchor: f64,
        k: usize,
        xi: f64,
        rest: &[f64],
        tol: f64,
    ) -> Result<f64> {
        let inner = |eta: f64| -> f64 {
            let i = inner_exponent(field, anchor, eta, rest, tol).unwrap_or(f64::NAN);
            -ratio(field, k, eta, rest) * math::exp(i)
        };
        crate::quad::integrate_split_at_zero(&inner, anchor, xi, tol)
    }

    pub fn g1(
        field: &CoefficientField,
        anchor: f64,
        x1: f64,
        rest: &[f64],
        tol: f64,
    ) -> Result<f64> {
        let inner = |xi: f64| -> f64 {
            math::exp(-inner_exponent(field, anchor, xi, rest, tol).unwrap_or(f64::NAN))
        };
        crate::quad::integrate_split_at_zero(&inner, anchor, x1, tol)
    }

    pub fn gk(
        field: &CoefficientField,
        anchor: f64,
        k: usize,
        x1: f64,
        rest: &[f64],
        tol: f64,
    ) -> Result<f64> {
        let inner = |xi: f64| -> f64 {
            let c = ck(field, anchor, k, xi, rest, tol).unwrap_or(f64::NAN);
            let i = inner_exponent(field, anchor, xi, rest, tol).unwrap_or(f64::NAN);
            c * math::exp(-i)
        };
        crate::quad::integrate_split_at_zero(&inner, anchor, x1, tol)
    }
}
