//! Simulation of d-dimensional SDEs whose drift jumps across a hyperplane
//! (or a smooth hypersurface) and whose diffusion may be degenerate.
//!
//! The drift discontinuity is removed by an explicit local change of
//! variables `G = (g_1, x_2 + g_2, ..., x_d + g_d)` built from scalar ODEs
//! in the first coordinate. The transformed system has locally Lipschitz
//! coefficients and is simulated with Euler–Maruyama; mapping back through
//! the local inverse `H` recovers the original dynamics. Charts are only
//! locally valid, so the path engine hops between them as paths move.
//!
//! Everything here is deterministic: given the same coefficients, seed and
//! step size, every trajectory is reproduced bit for bit. Randomness comes
//! from a counter-based generator, so increments are a pure function of
//! `(seed, path, step, coordinate)` and paths can be fanned out across
//! workers without coordination.
//!
//! The crate is `no_std`-compatible (with `alloc`); enable the `libm`
//! feature instead of `std` for float math on bare targets. IO, config and
//! file formats live in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("either the `std` or the `libm` feature must be enabled");

extern crate alloc;

pub mod cheb;
pub mod diag;
pub mod engine;
pub mod field;
pub mod linalg;
pub mod math;
pub mod models;
pub mod quad;
pub mod rng;
pub mod surface;
pub mod transform;

pub use diag::DiagnosticsReport;
pub use engine::{Scheme, SimConfig, Termination, Trajectory};
pub use field::{BoundarySide, CoefficientField, ValidationReport, Verdict};
pub use surface::SurfaceChart;
pub use transform::{ChartAtlas, Tolerances, TransformChart};

use alloc::string::String;

/// Crate-wide error type. Variants mirror the stages of the pipeline so a
/// caller can tell a bad input from a failed transform build from a numeric
/// blow-up mid-path.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Caller passed inconsistent data (dimension mismatch, empty grid, ...).
    Input(String),
    /// Quadrature failed to reach the requested tolerance or produced
    /// non-finite values.
    Quadrature(String),
    /// No radius could be certified for a transform chart.
    ChartBuild(String),
    /// Newton inversion of `G` diverged or hit its iteration cap.
    Inversion(String),
    /// Newton solve for the hypersurface inverse `e` failed.
    Surface(String),
    /// A path produced a non-finite state; carries the step index.
    Numeric { step: usize, message: String },
    /// Monte Carlo estimation was impossible (e.g. every path died early).
    Estimation(String),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Quadrature(m) => write!(f, "quadrature error: {m}"),
            Error::ChartBuild(m) => write!(f, "chart build error: {m}"),
            Error::Inversion(m) => write!(f, "inversion error: {m}"),
            Error::Surface(m) => write!(f, "surface chart error: {m}"),
            Error::Numeric { step, message } => {
                write!(f, "numeric error at step {step}: {message}")
            }
            Error::Estimation(m) => write!(f, "estimation error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
