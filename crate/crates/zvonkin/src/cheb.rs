//! Chebyshev interpolation in the non-leading coordinates.
//!
//! Transform charts cache cumulative integrals along the first coordinate
//! at a tensor grid of Chebyshev points in the remaining coordinates;
//! evaluation anywhere in the chart box contracts those caches with
//! barycentric weights. This module provides the 1-d grid, plus weight
//! vectors for the interpolant and its first two derivatives, so a single
//! dot product against nodal values yields `p`, `p'` or `p''`.

use crate::math;
use alloc::vec;
use alloc::vec::Vec;

/// Chebyshev points of the second kind on `[a, b]` with barycentric weights.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChebGrid {
    pub a: f64,
    pub b: f64,
    pub nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Contraction weights at one query point: `p(x) = sum_j value[j] * f_j`,
/// and likewise for derivatives. `d1`/`d2` are empty below the requested
/// level. The vectors are reusable scratch; `stencil_into` overwrites them.
#[derive(Debug, Clone, Default)]
pub struct StencilWeights {
    pub value: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

/// How many derivative weight vectors a query needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivLevel {
    Value,
    Grad,
    Hess,
}

impl ChebGrid {
    pub fn new(a: f64, b: f64, n: usize) -> Self {
        assert!(n >= 2, "Chebyshev grid needs at least 2 nodes");
        assert!(b > a, "empty interval");
        let m = n - 1;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for j in 0..n {
            // ascending in x: theta runs from pi down to 0
            let theta = core::f64::consts::PI * (m - j) as f64 / m as f64;
            let t = math::cos(theta);
            nodes.push(0.5 * (a + b) + 0.5 * (b - a) * t);
            let mut w = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == m {
                w *= 0.5;
            }
            weights.push(w);
        }
        ChebGrid { a, b, nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stencil(&self, x: f64, level: DerivLevel) -> StencilWeights {
        let mut out = StencilWeights::default();
        self.stencil_into(x, level, &mut out);
        out
    }

    /// Barycentric weights of the interpolant (and derivatives) at `x`,
    /// written into reusable buffers.
    pub fn stencil_into(&self, x: f64, level: DerivLevel, out: &mut StencilWeights) {
        let n = self.len();
        let scale = (math::abs(self.a) + math::abs(self.b)).max(1.0);
        for (j, &xj) in self.nodes.iter().enumerate() {
            if math::abs(x - xj) < 1e-14 * scale {
                self.stencil_at_node(j, level, out);
                return;
            }
        }
        // Off-node: differentiate the barycentric form p = N/D directly.
        out.value.clear();
        out.value.resize(n, 0.0);
        let mut dsum = 0.0;
        let mut d1sum = 0.0;
        let mut d2sum = 0.0;
        // store a_j in value, reuse d1/d2 for a'_j and a''_j
        out.d1.clear();
        out.d2.clear();
        let want_d1 = level >= DerivLevel::Grad;
        let want_d2 = level >= DerivLevel::Hess;
        if want_d1 {
            out.d1.resize(n, 0.0);
        }
        if want_d2 {
            out.d2.resize(n, 0.0);
        }
        for j in 0..n {
            let diff = x - self.nodes[j];
            let aj = self.weights[j] / diff;
            out.value[j] = aj;
            dsum += aj;
            if want_d1 {
                let aj1 = -aj / diff;
                out.d1[j] = aj1;
                d1sum += aj1;
                if want_d2 {
                    let aj2 = -2.0 * aj1 / diff;
                    out.d2[j] = aj2;
                    d2sum += aj2;
                }
            }
        }
        let inv = 1.0 / dsum;
        for j in 0..n {
            out.value[j] *= inv;
        }
        if want_d1 {
            // p' = sum (a1_j/D) f_j - (D'/D) p
            let r1 = d1sum * inv;
            for j in 0..n {
                out.d1[j] = out.d1[j] * inv - r1 * out.value[j];
            }
        }
        if want_d2 {
            // p'' = (N'' - 2 p' D' - p D'') / D
            let r1 = d1sum * inv;
            let r2 = d2sum * inv;
            for j in 0..n {
                out.d2[j] = out.d2[j] * inv - 2.0 * r1 * out.d1[j] - r2 * out.value[j];
            }
        }
    }

    /// Exact-node case: the value weight is a Kronecker delta and the
    /// derivative weights are rows of the differentiation matrices.
    fn stencil_at_node(&self, j: usize, level: DerivLevel, out: &mut StencilWeights) {
        let n = self.len();
        out.value.clear();
        out.value.resize(n, 0.0);
        out.value[j] = 1.0;
        out.d1.clear();
        out.d2.clear();
        if level >= DerivLevel::Grad {
            out.d1 = self.diff_row(j);
        }
        if level >= DerivLevel::Hess {
            // row j of D^2: contract row j of D with every row of D
            let row = self.diff_row(j);
            out.d2.resize(n, 0.0);
            for (k, &rk) in row.iter().enumerate() {
                if rk == 0.0 {
                    continue;
                }
                let rowk = self.diff_row(k);
                for (i, &v) in rowk.iter().enumerate() {
                    out.d2[i] += rk * v;
                }
            }
        }
    }

    /// Row `j` of the barycentric differentiation matrix.
    fn diff_row(&self, j: usize) -> Vec<f64> {
        let n = self.len();
        let mut row = vec![0.0; n];
        let mut diag = 0.0;
        for k in 0..n {
            if k == j {
                continue;
            }
            let v = (self.weights[k] / self.weights[j]) / (self.nodes[j] - self.nodes[k]);
            row[k] = v;
            diag -= v;
        }
        row[j] = diag;
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    fn contract(w: &[f64], f: &[f64]) -> f64 {
        w.iter().zip(f).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn reproduces_smooth_function_and_derivatives() {
        let grid = ChebGrid::new(-1.0, 2.0, 24);
        let f: Vec<f64> = grid.nodes.iter().map(|&x| math::exp(0.7 * x)).collect();
        for &x in &[-0.9, -0.3, 0.0, 0.41, 1.99] {
            let s = grid.stencil(x, DerivLevel::Hess);
            let truth = math::exp(0.7 * x);
            assert!((contract(&s.value, &f) - truth).abs() < 1e-10);
            assert!((contract(&s.d1, &f) - 0.7 * truth).abs() < 1e-8);
            assert!((contract(&s.d2, &f) - 0.49 * truth).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_on_polynomials_at_nodes_and_off() {
        let grid = ChebGrid::new(0.0, 1.0, 6);
        // p(x) = x^3: degree 3 < 6 nodes, so interpolation is exact.
        let f: Vec<f64> = grid.nodes.iter().map(|&x| x * x * x).collect();
        for &x in &[0.1, 0.5, grid.nodes[2], 0.99] {
            let s = grid.stencil(x, DerivLevel::Hess);
            assert!((contract(&s.value, &f) - x * x * x).abs() < 1e-13);
            assert!((contract(&s.d1, &f) - 3.0 * x * x).abs() < 1e-11);
            assert!((contract(&s.d2, &f) - 6.0 * x).abs() < 1e-10);
        }
    }

    #[test]
    fn node_hit_matches_off_node_limit() {
        let grid = ChebGrid::new(-1.0, 1.0, 12);
        let f: Vec<f64> = grid.nodes.iter().map(|&x| math::sin(x)).collect();
        let xj = grid.nodes[5];
        let at = grid.stencil(xj, DerivLevel::Grad);
        let near = grid.stencil(xj + 1e-9, DerivLevel::Grad);
        let v_at = contract(&at.value, &f);
        let v_near = contract(&near.value, &f);
        assert!((v_at - v_near).abs() < 1e-8);
        let d_at = contract(&at.d1, &f);
        let d_near = contract(&near.d1, &f);
        assert!((d_at - d_near).abs() < 1e-6);
    }

    #[test]
    fn stencil_into_reuses_buffers() {
        let grid = ChebGrid::new(0.0, 1.0, 8);
        let mut s = StencilWeights::default();
        grid.stencil_into(0.3, DerivLevel::Hess, &mut s);
        let v1 = s.value.clone();
        grid.stencil_into(0.7, DerivLevel::Value, &mut s);
        assert!(s.d1.is_empty() || s.d1.iter().all(|v| v.is_finite()));
        grid.stencil_into(0.3, DerivLevel::Hess, &mut s);
        assert_eq!(s.value, v1);
    }
}
