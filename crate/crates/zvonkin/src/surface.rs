//! Reduction of a drift discontinuity along a hypersurface `{f(x) = 0}` to
//! the hyperplane case, by the change of variables `U = f(X)`.
//!
//! The surface must be a graph over the first coordinate (`|df/dx1| > 0`),
//! so `f(., x_rest)` has an inverse `e(u, x_rest)` solved here by Newton.
//! Lifting replaces the first state coordinate by `u` and rewrites the
//! coefficients with the usual second-order correction term; the lifted
//! first diffusion row is `grad f . sigma`, whose squared norm is exactly
//! the transversality quantity, so checking transversality of the original
//! system is the same as checking first-entry ellipticity of the lifted one.

use crate::field::{CoefficientField, ScalarFn, SwitchRule, ValidationReport, Verdict};
use crate::math;
use crate::{Error, Result};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Evaluator writing the gradient (`d` values) or Hessian (`d*d`, row
/// major) of the surface function.
pub type SurfaceFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Lifted-coefficient evaluations keep their temporaries on the stack up
/// to this dimension (they sit on the hottest simulation path).
const MAX_STACK_DIM: usize = 8;

/// A hypersurface `{f = 0}` together with evaluators for its derivatives
/// and the Newton-based first-coordinate inverse `e`.
#[derive(Clone)]
pub struct SurfaceChart {
    dim: usize,
    f: ScalarFn,
    grad_f: Option<SurfaceFn>,
    hess_f: Option<SurfaceFn>,
    pub newton_tol: f64,
    pub newton_max: usize,
    /// Relative step for finite-difference derivatives of `f` when no
    /// analytic evaluators are supplied.
    pub fd_step: f64,
}

impl SurfaceChart {
    pub fn new(
        dim: usize,
        f: ScalarFn,
        grad_f: Option<SurfaceFn>,
        hess_f: Option<SurfaceFn>,
    ) -> Self {
        SurfaceChart {
            dim,
            f,
            grad_f,
            hess_f,
            newton_tol: 1e-12,
            newton_max: 50,
            fd_step: 1e-5,
        }
    }

    /// Plane `{x1 = 0}`: the trivial surface, whose lift is the identity.
    pub fn plane(dim: usize) -> Self {
        let grad: SurfaceFn = Arc::new(|_x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            out[0] = 1.0;
        });
        let hess: SurfaceFn = Arc::new(|_x: &[f64], out: &mut [f64]| out.fill(0.0));
        SurfaceChart::new(dim, Arc::new(|x: &[f64]| x[0]), Some(grad), Some(hess))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        if let Some(g) = &self.grad_f {
            g(x, out);
            return;
        }
        let h = self.fd_step * (1.0 + math::norm(x));
        let mut y = x.to_vec();
        for i in 0..self.dim {
            y[i] = x[i] + h;
            let fp = (self.f)(&y);
            y[i] = x[i] - h;
            let fm = (self.f)(&y);
            y[i] = x[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.grad_into(x, &mut out);
        out
    }

    pub fn hess_into(&self, x: &[f64], out: &mut [f64]) {
        if let Some(hs) = &self.hess_f {
            hs(x, out);
            return;
        }
        let d = self.dim;
        let h = self.fd_step * (1.0 + math::norm(x));
        let f0 = (self.f)(x);
        let mut y = x.to_vec();
        for i in 0..d {
            y[i] = x[i] + h;
            let fp = (self.f)(&y);
            y[i] = x[i] - h;
            let fm = (self.f)(&y);
            y[i] = x[i];
            out[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in i + 1..d {
                y[i] = x[i] + h;
                y[j] = x[j] + h;
                let fpp = (self.f)(&y);
                y[j] = x[j] - h;
                let fpm = (self.f)(&y);
                y[i] = x[i] - h;
                let fmm = (self.f)(&y);
                y[j] = x[j] + h;
                let fmp = (self.f)(&y);
                y[i] = x[i];
                y[j] = x[j];
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
    }

    /// Solves `f(x1, x_rest) = u` for `x1` by Newton, starting from
    /// `x1 = u` (exact when `f = x1 - b` with `b` independent of `x1`).
    pub fn solve_e(&self, u: f64, x_rest: &[f64]) -> Result<f64> {
        if x_rest.len() != self.dim - 1 {
            return Err(Error::Input(format!(
                "x_rest has {} coordinates, expected {}",
                x_rest.len(),
                self.dim - 1
            )));
        }
        let mut stack = [0.0f64; 2 * MAX_STACK_DIM];
        let mut heap: Vec<f64> = Vec::new();
        let buf: &mut [f64] = if self.dim <= MAX_STACK_DIM {
            &mut stack
        } else {
            heap.resize(2 * self.dim, 0.0);
            &mut heap
        };
        let (point, grad) = buf.split_at_mut(self.dim);
        point[1..self.dim].copy_from_slice(x_rest);
        self.solve_e_buffered(u, &mut point[..self.dim], &mut grad[..self.dim])
    }

    fn solve_e_buffered(&self, u: f64, point: &mut [f64], grad: &mut [f64]) -> Result<f64> {
        let mut x1 = u;
        let tol = self.newton_tol * (1.0 + math::abs(u));
        for _ in 0..self.newton_max {
            point[0] = x1;
            let residual = (self.f)(point) - u;
            if math::abs(residual) <= tol {
                return Ok(x1);
            }
            self.grad_into(point, grad);
            let slope = grad[0];
            if !slope.is_finite() || math::abs(slope) < 1e-12 {
                return Err(Error::Surface(format!(
                    "df/dx1 = {slope:.3e} too small at x1 = {x1}"
                )));
            }
            x1 -= residual / slope;
            if !x1.is_finite() {
                return Err(Error::Surface(String::from("Newton iterate diverged")));
            }
        }
        Err(Error::Surface(format!(
            "Newton for e(u, .) did not converge within {} iterations (u = {u})",
            self.newton_max
        )))
    }

    /// Minimum over the grid of `|grad f(x) . sigma(x)|^2`; passes iff the
    /// diffusion never becomes parallel to the surface (floor >= c).
    pub fn validate_transversality(
        &self,
        field: &CoefficientField,
        grid: &[Vec<f64>],
        c: f64,
    ) -> Result<ValidationReport> {
        if grid.is_empty() {
            return Err(Error::Input(String::from("empty sample grid")));
        }
        let d = self.dim;
        let mut floor = f64::INFINITY;
        let mut grad = vec![0.0; d];
        for x in grid {
            self.grad_into(x, &mut grad);
            let sigma = field.diffusion_matrix(x)?;
            let mut sq = 0.0;
            for j in 0..d {
                let mut v = 0.0;
                for i in 0..d {
                    v += grad[i] * sigma[i * d + j];
                }
                sq += v * v;
            }
            floor = floor.min(sq);
        }
        let pass = floor >= c;
        let mut report = ValidationReport {
            transversality_floor: Some(floor),
            ..Default::default()
        };
        report.verdicts.insert(
            String::from("transversality"),
            Verdict {
                pass,
                advisory: false,
                note: format!("min |grad f . sigma|^2 = {floor:.6e}, required {c:.6e}"),
            },
        );
        Ok(report)
    }

    /// Lifts the coefficients to `(u, x_2, ..., x_d)` coordinates. The
    /// lifted drift's discontinuity sits on `{u = 0}` with the plus half on
    /// `{u >= 0}`, and
    ///
    /// ```text
    /// bar_mu_1  = sum_i mu_i df/dx_i + 1/2 sum_ij (sigma sigma^T)_ij d2f/dx_i dx_j
    /// bar_mu_i  = mu_i                             (i >= 2)
    /// bar_sig_1j = sum_i sigma_ij df/dx_i
    /// bar_sig_ij = sigma_ij                        (i >= 2)
    /// ```
    ///
    /// all evaluated at `(e(u, x_rest), x_rest)`. A failed inverse solve
    /// surfaces as NaN coefficients (the path engine reports those as
    /// numeric errors rather than continuing silently).
    pub fn lift(&self, field: &CoefficientField) -> Result<CoefficientField> {
        if field.dim() != self.dim {
            return Err(Error::Input(format!(
                "field dimension {} does not match surface dimension {}",
                field.dim(),
                self.dim
            )));
        }
        let d = self.dim;

        // scratch layout: x(d) | mu/grad pair used by solve_e, then reused |
        // grad(d) | hess(d^2) | sigma(d^2)
        let scratch_len = |d: usize| 3 * d + 2 * d * d;

        let mk_drift = |half: crate::field::Half| {
            let chart = self.clone();
            let field = field.clone();
            Arc::new(move |up: &[f64], out: &mut [f64]| {
                let mut stack = [0.0f64; 3 * MAX_STACK_DIM + 2 * MAX_STACK_DIM * MAX_STACK_DIM];
                let mut heap: Vec<f64> = Vec::new();
                let buf: &mut [f64] = if d <= MAX_STACK_DIM {
                    &mut stack
                } else {
                    heap.resize(scratch_len(d), 0.0);
                    &mut heap
                };
                let (x, rest) = buf.split_at_mut(d);
                let (mu, rest) = rest.split_at_mut(d);
                let (grad, rest) = rest.split_at_mut(d);
                let (hess, rest) = rest.split_at_mut(d * d);
                let sigma = &mut rest[..d * d];

                x[1..d].copy_from_slice(&up[1..]);
                let Ok(x1) = chart.solve_e_buffered(up[0], x, grad) else {
                    out.fill(f64::NAN);
                    return;
                };
                x[0] = x1;
                field.drift_half_into(half, x, mu);
                chart.grad_into(x, grad);
                chart.hess_into(x, hess);
                field.diffusion_into(x, sigma);
                // bar_mu_1 = grad f . mu + 1/2 tr((sigma sigma^T) Hf)
                let mut first = math::dot(grad, mu);
                for i in 0..d {
                    for j in 0..d {
                        let mut a_ij = 0.0;
                        for k in 0..d {
                            a_ij += sigma[i * d + k] * sigma[j * d + k];
                        }
                        first += 0.5 * a_ij * hess[i * d + j];
                    }
                }
                out[0] = first;
                out[1..].copy_from_slice(&mu[1..]);
            }) as crate::field::VecFn
        };

        let lifted_sigma = {
            let chart = self.clone();
            let field = field.clone();
            Arc::new(move |up: &[f64], out: &mut [f64]| {
                let mut stack = [0.0f64; 2 * MAX_STACK_DIM + MAX_STACK_DIM * MAX_STACK_DIM];
                let mut heap: Vec<f64> = Vec::new();
                let buf: &mut [f64] = if d <= MAX_STACK_DIM {
                    &mut stack
                } else {
                    heap.resize(2 * d + d * d, 0.0);
                    &mut heap
                };
                let (x, rest) = buf.split_at_mut(d);
                let (grad, rest) = rest.split_at_mut(d);
                let sigma = &mut rest[..d * d];

                x[1..d].copy_from_slice(&up[1..]);
                let Ok(x1) = chart.solve_e_buffered(up[0], x, grad) else {
                    out.fill(f64::NAN);
                    return;
                };
                x[0] = x1;
                field.diffusion_into(x, sigma);
                chart.grad_into(x, grad);
                for j in 0..d {
                    let mut v = 0.0;
                    for i in 0..d {
                        v += grad[i] * sigma[i * d + j];
                    }
                    out[j] = v;
                }
                out[d..].copy_from_slice(&sigma[d..]);
            }) as crate::field::MatFn
        };

        let mut lifted = CoefficientField::new(
            d,
            mk_drift(crate::field::Half::Plus),
            mk_drift(crate::field::Half::Minus),
            lifted_sigma,
        )
        .with_switch(SwitchRule::FirstCoordinate)
        .with_boundary(field.boundary());
        if let Some(p) = field.projection() {
            // coordinates 2..d keep their meaning; the first becomes u
            let mut lo = p.lo.clone();
            let mut hi = p.hi.clone();
            lo[0] = f64::NAN;
            hi[0] = f64::NAN;
            lifted = lifted.with_projection(crate::field::Projection { lo, hi });
        }
        Ok(lifted.with_name(&format!("{}-lifted", field.name())))
    }
}

impl core::fmt::Debug for SurfaceChart {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SurfaceChart")
            .field("dim", &self.dim)
            .field("newton_tol", &self.newton_tol)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    #[test]
    fn e_is_identity_for_plane() {
        let chart = SurfaceChart::plane(2);
        assert!((chart.solve_e(0.7, &[3.0]).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn e_inverts_graph_surface() {
        // f(x) = x1 - b(x2) with b(y) = y: e(u, x2) = u + b(x2)
        let chart = models::dividend_surface(&models::DividendParams::default());
        let x1 = chart.solve_e(0.3, &[0.5]).unwrap();
        assert!((x1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn e_inverts_scaled_plane() {
        let chart = SurfaceChart::new(1, Arc::new(|x: &[f64]| 2.0 * x[0]), None, None);
        assert!((chart.solve_e(1.0, &[]).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn e_roundtrip_both_ways() {
        let chart = models::dividend_surface(&models::DividendParams::default());
        for &(x1, x2) in &[(0.3, 0.2), (-0.6, 0.9), (1.4, 0.5)] {
            let u = chart.value(&[x1, x2]);
            assert!((chart.solve_e(u, &[x2]).unwrap() - x1).abs() < 1e-11);
            let f_back = chart.value(&[chart.solve_e(u, &[x2]).unwrap(), x2]);
            assert!((f_back - u).abs() < 1e-11);
        }
    }

    #[test]
    fn transversality_plane_identity() {
        let chart = SurfaceChart::plane(2);
        let field = models::brownian(2);
        let report = chart
            .validate_transversality(&field, &[vec![0.0, 0.0], vec![1.0, 2.0]], 1.0)
            .unwrap();
        assert!((report.transversality_floor.unwrap() - 1.0).abs() < 1e-14);
        assert!(report.verdicts["transversality"].pass);
    }

    #[test]
    fn transversality_dividend_hand_value() {
        // s=1, theta=(0,1), b(y)=y, x2=0.5: grad f = (1,-1),
        // sigma col 1 = (1, q) with q = 0.25, so |(1-q, 0)|^2 = 0.5625
        let p = models::DividendParams::default();
        let chart = models::dividend_surface(&p);
        let field = models::dividend_original(&p);
        let report = chart
            .validate_transversality(&field, &[vec![0.7, 0.5]], 0.5)
            .unwrap();
        assert!((report.transversality_floor.unwrap() - 0.5625).abs() < 1e-12);
        assert!(report.verdicts["transversality"].pass);
    }

    #[test]
    fn transversality_fails_when_diffusion_parallel() {
        // choose b' so that s - b' q / s = 0 at x2 = 0.5: b' = s^2/q = 4
        let p = models::DividendParams {
            b: models::Threshold::linear(4.0),
            ..models::DividendParams::default()
        };
        let chart = models::dividend_surface(&p);
        let field = models::dividend_original(&p);
        let report = chart
            .validate_transversality(&field, &[vec![0.7, 0.5]], 0.01)
            .unwrap();
        assert!(report.transversality_floor.unwrap() < 1e-12);
        assert!(!report.verdicts["transversality"].pass);
    }

    #[test]
    fn lift_of_plane_is_identity_on_coefficients() {
        let chart = SurfaceChart::plane(2);
        let field = models::piecewise_constant_2d(0.5, 1.0, 1.0);
        let lifted = chart.lift(&field).unwrap();
        for x in [[0.4, -0.3], [-0.2, 0.8]] {
            assert_eq!(
                lifted.evaluate_drift(&x).unwrap(),
                field.evaluate_drift(&x).unwrap()
            );
            assert_eq!(
                lifted.diffusion_matrix(&x).unwrap(),
                field.diffusion_matrix(&x).unwrap()
            );
        }
    }

    #[test]
    fn lifted_dividend_matches_closed_forms() {
        let p = models::DividendParams::default();
        let lifted = models::dividend_lifted(&p);
        for &(u, x2) in &[(0.3, 0.5), (-0.4, 0.2), (0.0, 0.8)] {
            let mu = lifted.evaluate_drift(&[u, x2]).unwrap();
            let indicator = if u >= 0.0 { 1.0 } else { 0.0 };
            assert!((mu[0] - (x2 - p.kappa * indicator)).abs() < 1e-12);
            assert!(mu[1].abs() < 1e-12);
            let sigma = lifted.diffusion_matrix(&[u, x2]).unwrap();
            let q = p.q(x2);
            assert!((sigma[0] - (p.sigma - q / p.sigma)).abs() < 1e-12);
            assert!(sigma[1].abs() < 1e-12);
            assert!((sigma[2] - q / p.sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn lifted_first_row_squares_to_transversality() {
        let p = models::DividendParams::default();
        let chart = models::dividend_surface(&p);
        let field = models::dividend_original(&p);
        let lifted = chart.lift(&field).unwrap();
        for &(x1, x2) in &[(0.5, 0.3), (1.2, 0.7), (-0.4, 0.1)] {
            let u = chart.value(&[x1, x2]);
            let a11 = lifted.a11(&[u, x2]);
            let report = chart
                .validate_transversality(&field, &[vec![x1, x2]], 1e-9)
                .unwrap();
            assert!((a11 - report.transversality_floor.unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_derivatives_match_analytic() {
        let p = models::DividendParams {
            b: models::Threshold::from_fn(Arc::new(|y| 0.3 * y * y)),
            ..models::DividendParams::default()
        };
        let chart = models::dividend_surface(&p); // no analytic derivatives
        let x = [0.4, 0.6];
        let grad = chart.grad(&x);
        assert!((grad[0] - 1.0).abs() < 1e-8);
        assert!((grad[1] - (-0.6 * 0.6)).abs() < 1e-8);
        let mut hess = vec![0.0; 4];
        chart.hess_into(&x, &mut hess);
        assert!(hess[0].abs() < 1e-5);
        assert!((hess[3] - (-0.6)).abs() < 1e-5);
    }
}
