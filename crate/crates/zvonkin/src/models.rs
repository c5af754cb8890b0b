//! Built-in coefficient fields: the dividend model, the shared-noise
//! counterexample, and the piecewise-constant oracle models used heavily
//! by the tests.

use crate::field::{CoefficientField, Projection, ScalarFn, SwitchRule};
use crate::surface::{SurfaceChart, SurfaceFn};
use alloc::sync::Arc;
use alloc::vec;

/// Standard d-dimensional Brownian motion (zero drift, identity diffusion).
pub fn brownian(dim: usize) -> CoefficientField {
    CoefficientField::new(
        dim,
        Arc::new(|_x: &[f64], out: &mut [f64]| out.fill(0.0)),
        Arc::new(|_x: &[f64], out: &mut [f64]| out.fill(0.0)),
        Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = 1.0;
            }
        }),
    )
    .with_name("brownian")
}

/// d = 1, constant drift on each half, unit diffusion.
pub fn constant_drift_1d(plus: f64, minus: f64) -> CoefficientField {
    CoefficientField::new(
        1,
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = plus),
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = minus),
        Arc::new(|_x: &[f64], out: &mut [f64]| out[0] = 1.0),
    )
    .with_name("constant-1d")
}

/// d = 1, smooth drift `mu(x) = slope * x`, unit diffusion.
pub fn linear_drift_1d(slope: f64) -> CoefficientField {
    CoefficientField::new(
        1,
        Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = slope * x[0]),
        Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = slope * x[0]),
        Arc::new(|_x: &[f64], out: &mut [f64]| out[0] = 1.0),
    )
    .with_name("linear-1d")
}

/// d = 1, `mu(x) = x^2` (violates linear growth), unit diffusion.
pub fn quadratic_drift_1d() -> CoefficientField {
    CoefficientField::new(
        1,
        Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]),
        Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]),
        Arc::new(|_x: &[f64], out: &mut [f64]| out[0] = 1.0),
    )
    .with_name("quadratic-1d")
}

/// d = 1, deterministic: constant drift `rate`, zero diffusion.
pub fn deterministic_1d(rate: f64) -> CoefficientField {
    CoefficientField::new(
        1,
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = rate),
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = rate),
        Arc::new(|_x: &[f64], out: &mut [f64]| out[0] = 0.0),
    )
    .with_name("deterministic-1d")
}

/// The scalar oracle model: `mu(x) = -a * sgn(x)`, diffusion `sigma`.
///
/// For `a = 1/2`, `sigma = 1` the transform has the closed form
/// `g1(x) = sgn(x) (e^|x| - 1)` and the transformed drift vanishes.
pub fn piecewise_constant_1d(a: f64, sigma: f64) -> CoefficientField {
    CoefficientField::new(
        1,
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = -a),
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = a),
        Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = sigma),
    )
    .with_name("piecewise-constant-1d")
}

/// Two-dimensional variant: `mu = (-a sgn(x1), m)`, diffusion `sigma * I`.
/// With `a = 0`, `m` constant this is the oracle for the companion ODE:
/// `g2(x) = -m x1^2 / sigma^2`.
pub fn piecewise_constant_2d(a: f64, m: f64, sigma: f64) -> CoefficientField {
    CoefficientField::new(
        2,
        Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out[0] = -a;
            out[1] = m;
        }),
        Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out[0] = a;
            out[1] = m;
        }),
        Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&[sigma, 0.0, 0.0, sigma]);
        }),
    )
    .with_name("piecewise-constant-2d")
}

/// Threshold function `b` of the dividend model with optional analytic
/// derivatives (finite differences fill in when absent).
#[derive(Clone)]
pub struct Threshold {
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d1: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    pub d2: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl Threshold {
    pub fn linear(slope: f64) -> Self {
        Threshold {
            value: Arc::new(move |y| slope * y),
            d1: Some(Arc::new(move |_| slope)),
            d2: Some(Arc::new(|_| 0.0)),
        }
    }

    pub fn from_fn(f: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        Threshold {
            value: f,
            d1: None,
            d2: None,
        }
    }
}

/// Parameters of the dividend model. The firm value `X1` earns the
/// estimated drift `X2` and pays dividends at rate `kappa` whenever
/// `X1 >= b(X2)`; the estimator `X2` lives in `[theta1, theta2]` and is
/// driven by the same Brownian motion as `X1`.
#[derive(Clone)]
pub struct DividendParams {
    pub kappa: f64,
    pub sigma: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub b: Threshold,
}

impl Default for DividendParams {
    fn default() -> Self {
        DividendParams {
            kappa: 1.0,
            sigma: 1.0,
            theta1: 0.0,
            theta2: 1.0,
            b: Threshold::linear(1.0),
        }
    }
}

impl DividendParams {
    /// `q(y) = (theta2 - y)(y - theta1)`, the estimator's diffusion scale.
    pub fn q(&self, y: f64) -> f64 {
        (self.theta2 - y) * (y - self.theta1)
    }
}

/// The dividend model in its original coordinates: drift discontinuous
/// across the surface `{x1 = b(x2)}`, both components driven by the first
/// Brownian coordinate only (degenerate diffusion).
pub fn dividend_original(p: &DividendParams) -> CoefficientField {
    let kappa = p.kappa;
    let ps = p.clone();
    let bf = p.b.value.clone();
    let f: ScalarFn = Arc::new(move |x: &[f64]| x[0] - bf(x[1]));
    CoefficientField::new(
        2,
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = x[1] - kappa;
            out[1] = 0.0;
        }),
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = 0.0;
        }),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = ps.sigma;
            out[1] = 0.0;
            out[2] = ps.q(x[1]) / ps.sigma;
            out[3] = 0.0;
        }),
    )
    .with_switch(SwitchRule::LevelSet(f))
    .with_projection(Projection {
        lo: vec![f64::NAN, p.theta1],
        hi: vec![f64::NAN, p.theta2],
    })
    .with_name("dividend")
}

/// The surface chart of the dividend model: `f(x) = x1 - b(x2)`.
pub fn dividend_surface(p: &DividendParams) -> SurfaceChart {
    let bv = p.b.value.clone();
    let f: ScalarFn = Arc::new(move |x: &[f64]| x[0] - bv(x[1]));
    let grad = p.b.d1.clone().map(|db| -> SurfaceFn {
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = 1.0;
            out[1] = -db(x[1]);
        })
    });
    let hess = p.b.d2.clone().map(|d2b| -> SurfaceFn {
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            out[3] = -d2b(x[1]);
        })
    });
    SurfaceChart::new(2, f, grad, hess)
}

/// The dividend model lifted to `(u, x2)` coordinates with
/// `u = x1 - b(x2)`; the drift discontinuity sits on `{u = 0}`.
pub fn dividend_lifted(p: &DividendParams) -> CoefficientField {
    let chart = dividend_surface(p);
    chart
        .lift(&dividend_original(p))
        .expect("dividend lift is well posed")
        .with_name("dividend-lifted")
}

/// The two-dimensional shared-noise system with no strong solution:
/// `dX1 = (1/2 - sgn(X1 + X2)) dt + dW`, `dX2 = -dW`. Its first diffusion
/// row is non-degenerate, but the noise cancels in the sum `X1 + X2`,
/// which is exactly the direction transverse to the discontinuity.
pub fn counterexample_2d() -> CoefficientField {
    let f: ScalarFn = Arc::new(|x: &[f64]| x[0] + x[1]);
    CoefficientField::new(
        2,
        Arc::new(|_x: &[f64], out: &mut [f64]| {
            out[0] = -0.5;
            out[1] = 0.0;
        }),
        Arc::new(|_x: &[f64], out: &mut [f64]| {
            out[0] = 1.5;
            out[1] = 0.0;
        }),
        Arc::new(|_x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&[1.0, 0.0, -1.0, 0.0]);
        }),
    )
    .with_switch(SwitchRule::LevelSet(f))
    .with_name("counterexample")
}

/// Scalar version of the counterexample drift with unit noise restored:
/// `dx = (1/2 - sgn(x)) dt + dW`. Used as the contrast run showing that
/// with genuine noise in the offending direction, paths leave any bounded
/// interval.
pub fn counterexample_scalar() -> CoefficientField {
    constant_drift_1d(-0.5, 1.5).with_name("counterexample-scalar")
}
