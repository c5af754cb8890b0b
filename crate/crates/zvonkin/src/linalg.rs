//! Dense linear algebra for small matrices (the state dimension `d` is a
//! handful at most). Row-major `d x d` layout throughout: entry `(i, j)` is
//! `a[i * d + j]`.

use crate::math;
use alloc::vec;
use alloc::vec::Vec;

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting.
/// Returns `None` if a pivot is (numerically) zero.
pub fn solve(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..d {
        let mut pivot = col;
        let mut best = math::abs(m[col * d + col]);
        for row in col + 1..d {
            let v = math::abs(m[row * d + col]);
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if pivot != col {
            for j in col..d {
                m.swap(col * d + j, pivot * d + j);
            }
            x.swap(col, pivot);
        }
        let inv = 1.0 / m[col * d + col];
        for row in col + 1..d {
            let factor = m[row * d + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..d {
                m[row * d + j] -= factor * m[col * d + j];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..d).rev() {
        let mut v = x[col];
        for j in col + 1..d {
            v -= m[col * d + j] * x[j];
        }
        x[col] = v / m[col * d + col];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// In-place variant of [`solve`]: destroys `a`, leaves the solution in
/// `b`. Returns false on a (numerically) singular pivot.
pub fn solve_in_place(a: &mut [f64], b: &mut [f64], d: usize) -> bool {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d);
    for col in 0..d {
        let mut pivot = col;
        let mut best = math::abs(a[col * d + col]);
        for row in col + 1..d {
            let v = math::abs(a[row * d + col]);
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return false;
        }
        if pivot != col {
            for j in col..d {
                a.swap(col * d + j, pivot * d + j);
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / a[col * d + col];
        for row in col + 1..d {
            let factor = a[row * d + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..d {
                a[row * d + j] -= factor * a[col * d + j];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..d).rev() {
        let mut v = b[col];
        for j in col + 1..d {
            v -= a[col * d + j] * b[j];
        }
        b[col] = v / a[col * d + col];
    }
    b.iter().all(|v| v.is_finite())
}

/// LU factorization with partial pivoting, in place. Multipliers are
/// stored below the diagonal; `piv[col]` records the row swapped into
/// `col`. Returns false on a (numerically) singular pivot.
pub fn factor_in_place(a: &mut [f64], piv: &mut [usize], d: usize) -> bool {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(piv.len(), d);
    for col in 0..d {
        let mut p = col;
        let mut best = math::abs(a[col * d + col]);
        for row in col + 1..d {
            let v = math::abs(a[row * d + col]);
            if v > best {
                best = v;
                p = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return false;
        }
        piv[col] = p;
        if p != col {
            for j in 0..d {
                a.swap(col * d + j, p * d + j);
            }
        }
        let inv = 1.0 / a[col * d + col];
        for row in col + 1..d {
            let f = a[row * d + col] * inv;
            a[row * d + col] = f;
            if f == 0.0 {
                continue;
            }
            for j in col + 1..d {
                a[row * d + j] -= f * a[col * d + j];
            }
        }
    }
    true
}

/// Solves `A x = b` given the output of [`factor_in_place`]; `b` becomes
/// the solution.
pub fn solve_factored(lu: &[f64], piv: &[usize], b: &mut [f64], d: usize) {
    for col in 0..d {
        b.swap(col, piv[col]);
        let bc = b[col];
        if bc != 0.0 {
            for row in col + 1..d {
                b[row] -= lu[row * d + col] * bc;
            }
        }
    }
    for col in (0..d).rev() {
        let mut v = b[col];
        for j in col + 1..d {
            v -= lu[col * d + j] * b[j];
        }
        b[col] = v / lu[col * d + col];
    }
}

/// Matrix-vector product `A v`.
pub fn matvec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| math::dot(&a[i * d..(i + 1) * d], v)).collect()
}

/// Matrix-matrix product `A B`.
pub fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method, ascending.
pub fn sym_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off <= 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if math::abs(apq) < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + math::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + math::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..d {
                    let akp = m[k * d + p];
                    let akq = m[k * d + q];
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = m[p * d + k];
                    let aqk = m[q * d + k];
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    eig
}

/// Smallest singular value of a (not necessarily symmetric) matrix,
/// computed as the square root of the smallest eigenvalue of `A^T A`.
pub fn min_singular_value(a: &[f64], d: usize) -> f64 {
    let mut ata = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k * d + i] * a[k * d + j];
            }
            ata[i * d + j] = s;
        }
    }
    let eig = sym_eigenvalues(&ata, d);
    math::sqrt(eig[0].max(0.0))
}

/// Least-squares fit of `y ~ c0 + c1 * t` over sample pairs. Returns
/// `(c0, c1)`; degenerate designs (all `t` equal) collapse to `c1 = 0`.
pub fn fit_affine(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let st: f64 = t.iter().sum();
    let sy: f64 = y.iter().sum();
    let stt: f64 = t.iter().map(|v| v * v).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * stt - st * st;
    if math::abs(det) < 1e-12 * (1.0 + stt) * n {
        return (sy / n, 0.0);
    }
    let c0 = (stt * sy - st * sty) / det;
    let c1 = (n * sty - st * sy) / det;
    (c0, c1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_2x2() {
        // [2 1; 1 3] x = [5; 10]  =>  x = (1, 3)
        let x = solve(&[2.0, 1.0, 1.0, 3.0], &[5.0, 10.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert!((x[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn solve_singular_is_none() {
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2).is_none());
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let eig = sym_eigenvalues(&[4.0, 0.0, 0.0, 9.0], 2);
        assert!((eig[0] - 4.0).abs() < 1e-12);
        assert!((eig[1] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn min_singular_value_matches_hand_cases() {
        // Diagonal: singular values are |entries|.
        assert!((min_singular_value(&[3.0, 0.0, 0.0, 4.0], 2) - 3.0).abs() < 1e-12);
        // Rotation: all singular values are 1.
        let (c, s) = (0.6, 0.8);
        assert!((min_singular_value(&[c, -s, s, c], 2) - 1.0).abs() < 1e-12);
        // Rank-deficient: smallest singular value is 0.
        assert!(min_singular_value(&[1.0, 0.0, -1.0, 0.0], 2) < 1e-12);
    }

    #[test]
    fn affine_fit_recovers_exact_line() {
        let t = [1.0, 2.0, 4.0, 8.0];
        let y: alloc::vec::Vec<f64> = t.iter().map(|v| 0.5 + 2.0 * v).collect();
        let (c0, c1) = fit_affine(&t, &y);
        assert!((c0 - 0.5).abs() < 1e-12);
        assert!((c1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn solve_3x3_random_roundtrip() {
        let a = [3.0, 0.5, -1.0, 0.2, 2.0, 0.3, -0.4, 0.1, 1.5];
        let x_true = [1.0, -2.0, 0.5];
        let b = matvec(&a, &x_true, 3);
        let x = solve(&a, &b, 3).unwrap();
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_solve_matches_direct() {
        let a = [0.1, 2.0, -1.0, 4.0, 0.3, 0.2, 1.0, -0.5, 2.5];
        let x_true = [0.7, -1.3, 2.1];
        let b = matvec(&a, &x_true, 3);
        let mut lu = a;
        let mut piv = [0usize; 3];
        assert!(factor_in_place(&mut lu, &mut piv, 3));
        let mut x = b;
        solve_factored(&lu, &piv, &mut x, 3);
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12, "{x:?}");
        }
        // reuse the factorization with another right-hand side
        let b2 = matvec(&a, &[1.0, 1.0, 1.0], 3);
        let mut x2 = b2;
        solve_factored(&lu, &piv, &mut x2, 3);
        for v in x2 {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_in_place_matches_solve() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let mut a2 = a;
        let mut b = [5.0, 10.0];
        assert!(solve_in_place(&mut a2, &mut b, 2));
        assert!((b[0] - 1.0).abs() < 1e-14);
        assert!((b[1] - 3.0).abs() < 1e-14);
    }
}
