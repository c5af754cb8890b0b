//! Piecewise-smooth SDE coefficients and numeric validators for the
//! standing assumptions.
//!
//! A [`CoefficientField`] is the definition of the SDE: two smooth drift
//! halves that meet discontinuously across an interface, and a (possibly
//! degenerate) diffusion matrix. The validators sample a user grid and
//! measure what the theory assumes: a positive floor on `(sigma sigma^T)_11`,
//! linear growth of the drift, and finite-difference smoothness of the
//! coefficient halves. A finite grid can refute an assumption but never
//! certify it globally; the growth check in particular is advisory.

use crate::math;
use crate::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Vector-valued coefficient evaluator: writes `d` outputs for a `d`-dim
/// input. Shared immutably, so fields can be cloned across workers.
pub type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Matrix-valued evaluator: writes `d*d` outputs, row-major.
pub type MatFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Scalar field evaluator.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Which drift half applies exactly on the interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BoundarySide {
    #[default]
    Plus,
    Minus,
}

/// One of the two smooth halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Half {
    Plus,
    Minus,
}

/// Where the drift switches half.
#[derive(Clone)]
pub enum SwitchRule {
    /// Across the hyperplane `{x1 = 0}` (the form the transform needs).
    FirstCoordinate,
    /// Across the level set `{f(x) = 0}` of a smooth scalar field.
    LevelSet(ScalarFn),
}

/// Componentwise clamp box applied after each simulation step, for models
/// whose exact dynamics confine some coordinates (diffusion vanishing on
/// the boundary). `NAN` entries mean unbounded.
#[derive(Debug, Clone)]
pub struct Projection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Projection {
    /// Clamps `x` in place; returns true if anything moved.
    pub fn apply(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (i, xi) in x.iter_mut().enumerate() {
            if !self.lo[i].is_nan() && *xi < self.lo[i] {
                *xi = self.lo[i];
                moved = true;
            }
            if !self.hi[i].is_nan() && *xi > self.hi[i] {
                *xi = self.hi[i];
                moved = true;
            }
        }
        moved
    }
}

/// The SDE's coefficients: piecewise-smooth drift and diffusion matrix.
/// Immutable after construction and cheap to clone.
#[derive(Clone)]
pub struct CoefficientField {
    dim: usize,
    drift_plus: VecFn,
    drift_minus: VecFn,
    diffusion: MatFn,
    boundary: BoundarySide,
    switch: SwitchRule,
    projection: Option<Projection>,
    name: String,
}

impl core::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("dim", &self.dim)
            .field("name", &self.name)
            .field("boundary", &self.boundary)
            .finish()
    }
}

impl CoefficientField {
    pub fn new(
        dim: usize,
        drift_plus: VecFn,
        drift_minus: VecFn,
        diffusion: MatFn,
    ) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        CoefficientField {
            dim,
            drift_plus,
            drift_minus,
            diffusion,
            boundary: BoundarySide::Plus,
            switch: SwitchRule::FirstCoordinate,
            projection: None,
            name: String::from("custom"),
        }
    }

    pub fn with_boundary(mut self, side: BoundarySide) -> Self {
        self.boundary = side;
        self
    }

    pub fn with_switch(mut self, rule: SwitchRule) -> Self {
        self.switch = rule;
        self
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        assert_eq!(projection.lo.len(), self.dim);
        assert_eq!(projection.hi.len(), self.dim);
        self.projection = Some(projection);
        self
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = String::from(name);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn boundary(&self) -> BoundarySide {
        self.boundary
    }

    /// True when the discontinuity sits on `{x1 = 0}`, the form the
    /// transform construction requires.
    pub fn is_hyperplane_form(&self) -> bool {
        matches!(self.switch, SwitchRule::FirstCoordinate)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Input(format!(
                "point has dimension {}, field expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Which half governs the drift at `x`.
    pub fn half_at(&self, x: &[f64]) -> Half {
        let s = match &self.switch {
            SwitchRule::FirstCoordinate => x[0],
            SwitchRule::LevelSet(f) => f(x),
        };
        if s > 0.0 {
            Half::Plus
        } else if s < 0.0 {
            Half::Minus
        } else {
            match self.boundary {
                BoundarySide::Plus => Half::Plus,
                BoundarySide::Minus => Half::Minus,
            }
        }
    }

    /// Evaluates the chosen half regardless of where `x` lies.
    pub fn drift_half_into(&self, half: Half, x: &[f64], out: &mut [f64]) {
        match half {
            Half::Plus => (self.drift_plus)(x, out),
            Half::Minus => (self.drift_minus)(x, out),
        }
    }

    pub fn drift_half(&self, half: Half, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_half_into(half, x, &mut out);
        out
    }

    /// The piecewise drift: plus half for positive side, minus half for
    /// negative, boundary convention on the interface itself.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        self.drift_half_into(self.half_at(x), x, out);
    }

    pub fn evaluate_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        Ok(out)
    }

    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out);
    }

    pub fn diffusion_matrix(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.dim * self.dim];
        self.diffusion_into(x, &mut out);
        Ok(out)
    }

    /// `(sigma sigma^T)_11 = sum_j sigma_1j^2`, the quantity whose positive
    /// floor the whole construction rests on.
    pub fn a11(&self, x: &[f64]) -> f64 {
        let mut sig = vec![0.0; self.dim * self.dim];
        self.diffusion_into(x, &mut sig);
        sig[..self.dim].iter().map(|v| v * v).sum()
    }

    /// `a11` with a caller-provided scratch buffer (hot-path variant).
    #[inline]
    pub fn a11_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.diffusion_into(x, scratch);
        scratch[..self.dim].iter().map(|v| v * v).sum()
    }
}

/// Outcome of one validated assumption.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Verdict {
    pub pass: bool,
    /// Advisory checks report but are not meant to gate execution.
    pub advisory: bool,
    pub note: String,
}

/// Fitted linear-growth envelope for the drift.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrowthFit {
    pub d1: f64,
    pub d2: f64,
    /// Largest relative excess of `|mu(x)|` over the fitted bound.
    pub max_rel_excess: f64,
}

/// Finite-difference regularity verdict for one coefficient component.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothnessFlag {
    pub component: String,
    pub order: u8,
    pub pass: bool,
    pub worst_ratio_deviation: f64,
}

/// Aggregate report of the assumption validators. Sections are filled by
/// whichever validators ran.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ValidationReport {
    pub ellipticity_floor: Option<f64>,
    pub ellipticity_required: Option<f64>,
    pub growth: Option<GrowthFit>,
    pub smoothness: Option<Vec<SmoothnessFlag>>,
    pub transversality_floor: Option<f64>,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl ValidationReport {
    pub fn all_required_pass(&self) -> bool {
        self.verdicts.values().all(|v| v.advisory || v.pass)
    }

    pub fn merge(&mut self, other: ValidationReport) {
        if other.ellipticity_floor.is_some() {
            self.ellipticity_floor = other.ellipticity_floor;
            self.ellipticity_required = other.ellipticity_required;
        }
        if other.growth.is_some() {
            self.growth = other.growth;
        }
        if other.smoothness.is_some() {
            self.smoothness = other.smoothness;
        }
        if other.transversality_floor.is_some() {
            self.transversality_floor = other.transversality_floor;
        }
        self.verdicts.extend(other.verdicts);
    }
}

/// Measures the infimum of `(sigma sigma^T)_11` over the grid; passes iff
/// it stays at or above the requested floor `c > 0`.
pub fn validate_ellipticity(
    field: &CoefficientField,
    grid: &[Vec<f64>],
    c: f64,
) -> Result<ValidationReport> {
    if grid.is_empty() {
        return Err(Error::Input(String::from("empty sample grid")));
    }
    if !(c > 0.0) {
        return Err(Error::Input(String::from("ellipticity floor must be positive")));
    }
    let mut floor = f64::INFINITY;
    for x in grid {
        field.check_dim(x)?;
        floor = floor.min(field.a11(x));
    }
    let pass = floor >= c;
    let mut report = ValidationReport {
        ellipticity_floor: Some(floor),
        ellipticity_required: Some(c),
        ..Default::default()
    };
    report.verdicts.insert(
        String::from("ellipticity"),
        Verdict {
            pass,
            advisory: false,
            note: format!("min (sigma sigma^T)_11 = {floor:.6e}, required {c:.6e}"),
        },
    );
    Ok(report)
}

/// Fits `|mu(x)| <= D1 + D2 |x|` by least squares over the grid and reports
/// the worst relative excess over the fitted bound. Advisory: a finite grid
/// cannot certify a global growth bound.
pub fn validate_growth(field: &CoefficientField, grid: &[Vec<f64>]) -> Result<ValidationReport> {
    if grid.is_empty() {
        return Err(Error::Input(String::from("empty sample grid")));
    }
    let mut norms_x = Vec::with_capacity(grid.len());
    let mut norms_mu = Vec::with_capacity(grid.len());
    for x in grid {
        let mu = field.evaluate_drift(x)?;
        norms_x.push(math::norm(x));
        norms_mu.push(math::norm(&mu));
    }
    // raw least-squares fit; the growth theorem wants nonnegative
    // constants, but clamping here would lift the bound above the data and
    // hide super-linear growth, so the fit is reported as computed
    let (d1, d2) = crate::linalg::fit_affine(&norms_x, &norms_mu);
    let scale = norms_mu.iter().cloned().fold(0.0f64, f64::max);
    let tiny = 1e-12 * (1.0 + scale);
    let mut max_rel_excess = 0.0f64;
    for (nx, nmu) in norms_x.iter().zip(&norms_mu) {
        let bound = d1 + d2 * nx;
        let excess = nmu - bound;
        if excess > tiny {
            max_rel_excess = max_rel_excess.max(excess / bound.max(tiny));
        }
    }
    if norms_mu.iter().all(|&v| v == 0.0) {
        max_rel_excess = 0.0;
    }
    let fit = GrowthFit { d1, d2, max_rel_excess };
    let mut report = ValidationReport {
        growth: Some(fit.clone()),
        ..Default::default()
    };
    report.verdicts.insert(
        String::from("growth"),
        Verdict {
            pass: max_rel_excess <= 0.1,
            advisory: true,
            note: format!(
                "fit |mu| <= {:.4e} + {:.4e}|x|, max relative excess {:.3e}; \
                 grid-limited heuristic, cannot certify a global bound",
                fit.d1, fit.d2, fit.max_rel_excess
            ),
        },
    );
    Ok(report)
}

/// Finite-difference smoothness probe for one drift half and the first
/// diffusion row, up to the requested derivative order (1..=3).
///
/// For each order the derivative is estimated with central differences at
/// steps `h` and `h/2`; the estimates of a function with that many
/// continuous derivatives agree, so the ratio test
/// `|est(h/2)/est(h) - 1| < 0.5` flags components that are not smooth
/// enough near the grid point.
pub fn probe_smoothness(
    field: &CoefficientField,
    half: Half,
    order: u8,
    grid: &[Vec<f64>],
) -> Result<ValidationReport> {
    if grid.is_empty() {
        return Err(Error::Input(String::from("empty sample grid")));
    }
    if !(1..=3).contains(&order) {
        return Err(Error::Input(String::from("order must be in 1..=3")));
    }
    let d = field.dim();
    let half_name = match half {
        Half::Plus => "mu+",
        Half::Minus => "mu-",
    };
    let mut flags: Vec<SmoothnessFlag> = Vec::new();

    let drift_component = |x: &[f64], i: usize| -> f64 {
        let mut out = vec![0.0; d];
        field.drift_half_into(half, x, &mut out);
        out[i]
    };
    let sigma_component = |x: &[f64], j: usize| -> f64 {
        let mut out = vec![0.0; d * d];
        field.diffusion_into(x, &mut out);
        out[j]
    };

    for i in 0..d {
        let name = format!("{half_name}_{}", i + 1);
        let flag = probe_component(&|x| drift_component(x, i), &name, order, grid, d);
        flags.push(flag);
    }
    for j in 0..d {
        let name = format!("sigma_1{}", j + 1);
        let flag = probe_component(&|x| sigma_component(x, j), &name, order, grid, d);
        flags.push(flag);
    }

    let all_pass = flags.iter().all(|f| f.pass);
    let mut report = ValidationReport {
        smoothness: Some(flags),
        ..Default::default()
    };
    report.verdicts.insert(
        format!("smoothness[{half_name}]"),
        Verdict {
            pass: all_pass,
            advisory: false,
            note: format!("finite-difference ratio test up to order {order}"),
        },
    );
    Ok(report)
}

fn probe_component(
    eval: &dyn Fn(&[f64]) -> f64,
    name: &str,
    order: u8,
    grid: &[Vec<f64>],
    d: usize,
) -> SmoothnessFlag {
    let mut worst = 0.0f64;
    let mut pass = true;
    for x in grid {
        let h0 = 1e-2 * (1.0 + math::norm(x));
        for axis in 0..d {
            for k in 1..=order {
                let est_h = central_diff(eval, x, axis, k, h0);
                let est_h2 = central_diff(eval, x, axis, k, 0.5 * h0);
                let scale = math::abs(est_h).max(math::abs(est_h2));
                // both estimates negligibly small: a stable zero
                if scale < 1e-7 * (1.0 + math::abs(eval(x))) {
                    continue;
                }
                let dev = math::abs(est_h2 / est_h - 1.0);
                if dev > worst {
                    worst = dev;
                }
                if dev >= 0.5 {
                    pass = false;
                }
            }
        }
    }
    SmoothnessFlag {
        component: String::from(name),
        order,
        pass,
        worst_ratio_deviation: worst,
    }
}

/// Central finite difference of order `k` (1..=3) along `axis`.
fn central_diff(eval: &dyn Fn(&[f64]) -> f64, x: &[f64], axis: usize, k: u8, h: f64) -> f64 {
    let p = |offset: f64| {
        let mut y = x.to_vec();
        y[axis] += offset;
        eval(&y)
    };
    match k {
        1 => (p(h) - p(-h)) / (2.0 * h),
        2 => (p(h) - 2.0 * p(0.0) + p(-h)) / (h * h),
        3 => (p(2.0 * h) - 2.0 * p(h) + 2.0 * p(-h) - p(-2.0 * h)) / (2.0 * h * h * h),
        _ => unreachable!(),
    }
}
