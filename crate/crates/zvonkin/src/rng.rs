//! Counter-based Gaussian noise.
//!
//! Monte Carlo over many paths needs increments that are a *pure function*
//! of `(seed, path, step, coordinate)`: the same tuple must yield the same
//! number no matter which worker asks, in which order, or how many threads
//! exist. A stateful generator cannot give that; a keyed mixing function
//! can. Each 64-bit output word is produced by two rounds of the
//! SplitMix64 finalizer applied to an injective encoding of the counter,
//! keyed per `(seed, path)`. Normals come from the Box–Muller transform,
//! which is exact (no rational approximation constants to get wrong).

use crate::math;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SEED_SALT: u64 = 0x5851_F42D_4C95_7F2D;
const PATH_SALT: u64 = 0x1405_7B7E_F767_814F;

/// SplitMix64 finalizer: a bijective 64-bit mixer with full avalanche.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// One per-path noise stream: a pair of derived keys, no mutable state.
///
/// Counter layout: `(step << 16) | word_index`, so up to 2^16 raw words per
/// step (32768 Gaussian pairs, far beyond any state dimension here) and
/// 2^48 steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    k1: u64,
    k2: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, path_index: u64) -> Self {
        let s = mix64(seed ^ SEED_SALT);
        let p = mix64(path_index.wrapping_mul(GOLDEN) ^ PATH_SALT);
        let k1 = mix64(s ^ p);
        let k2 = mix64(k1 ^ GOLDEN);
        NoiseStream { k1, k2 }
    }

    /// Raw keyed word for `(step, word_index)`.
    #[inline(always)]
    pub fn word(&self, step: u64, word_index: u64) -> u64 {
        debug_assert!(word_index < 1 << 16);
        let counter = (step << 16) | word_index;
        mix64(mix64(counter ^ self.k1).wrapping_add(self.k2))
    }

    /// Uniform in the half-open interval [0, 1), 53-bit resolution.
    #[inline(always)]
    pub fn uniform(&self, step: u64, word_index: u64) -> f64 {
        (self.word(step, word_index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One Box–Muller pair of independent standard normals.
    ///
    /// `u1` is shifted into (0, 1] so the logarithm is always finite.
    #[inline(always)]
    pub fn normal_pair(&self, step: u64, pair_index: u64) -> (f64, f64) {
        let w0 = self.word(step, 2 * pair_index);
        let w1 = self.word(step, 2 * pair_index + 1);
        let u1 = ((w0 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (w1 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = math::sqrt(-2.0 * math::ln(u1));
        let theta = core::f64::consts::TAU * u2;
        (r * math::cos(theta), r * math::sin(theta))
    }

    /// Standard normal for one coordinate. Coordinates are consumed in
    /// Box–Muller pairs: coordinate `2m` and `2m+1` share pair `m`.
    #[inline]
    pub fn standard_normal(&self, step: u64, coord: usize) -> f64 {
        let pair = self.normal_pair(step, (coord / 2) as u64);
        if coord % 2 == 0 {
            pair.0
        } else {
            pair.1
        }
    }

    /// Fills `out` with the Brownian increments for one step: independent
    /// N(0, h) draws, one per coordinate, `scale = sqrt(h)`.
    #[inline]
    pub fn fill_increments(&self, step: u64, scale: f64, out: &mut [f64]) {
        let d = out.len();
        let mut m = 0;
        while 2 * m < d {
            let (z0, z1) = self.normal_pair(step, m as u64);
            out[2 * m] = scale * z0;
            if 2 * m + 1 < d {
                out[2 * m + 1] = scale * z1;
            }
            m += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn pure_function_of_indices() {
        let a = NoiseStream::new(42, 7);
        let b = NoiseStream::new(42, 7);
        for step in [0u64, 1, 999_999] {
            for coord in 0..5 {
                assert_eq!(
                    a.standard_normal(step, coord).to_bits(),
                    b.standard_normal(step, coord).to_bits()
                );
            }
        }
    }

    #[test]
    fn distinct_indices_decorrelate() {
        let s = NoiseStream::new(1, 0);
        let t = NoiseStream::new(1, 1);
        let u = NoiseStream::new(2, 0);
        assert_ne!(s.word(0, 0), t.word(0, 0));
        assert_ne!(s.word(0, 0), u.word(0, 0));
        assert_ne!(s.word(0, 0), s.word(1, 0));
        assert_ne!(s.word(0, 0), s.word(0, 1));
    }

    /// Sample moments of the normal output against their standard errors.
    #[test]
    fn normal_moments() {
        let n: usize = 1 << 21;
        let stream = NoiseStream::new(0xDEADBEEF, 3);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut m3 = 0.0;
        let mut m4 = 0.0;
        let mut below = 0usize;
        for i in 0..n {
            let z = stream.standard_normal(i as u64, 0);
            m1 += z;
            m2 += z * z;
            m3 += z * z * z;
            m4 += z * z * z * z;
            if z < 0.0 {
                below += 1;
            }
        }
        let nf = n as f64;
        let se = |v: f64| 4.0 * (v / nf).sqrt();
        assert!((m1 / nf).abs() < se(1.0), "mean {}", m1 / nf);
        assert!((m2 / nf - 1.0).abs() < se(2.0), "var {}", m2 / nf);
        assert!((m3 / nf).abs() < se(15.0), "3rd {}", m3 / nf);
        assert!((m4 / nf - 3.0).abs() < se(96.0), "4th {}", m4 / nf);
        let frac = below as f64 / nf;
        assert!((frac - 0.5).abs() < 4.0 * 0.5 / nf.sqrt(), "P(z<0) {frac}");
    }

    /// Serial correlation along steps, across lanes of a pair, and across
    /// neighbouring paths must all vanish at the 4-sigma level.
    #[test]
    fn correlations_vanish() {
        let n: usize = 1 << 20;
        let s0 = NoiseStream::new(99, 0);
        let s1 = NoiseStream::new(99, 1);
        let mut lag = 0.0;
        let mut lane = 0.0;
        let mut cross = 0.0;
        let mut prev = s0.standard_normal(0, 0);
        for i in 1..n {
            let z = s0.standard_normal(i as u64, 0);
            let (a, b) = s0.normal_pair(i as u64, 0);
            lag += prev * z;
            lane += a * b;
            cross += z * s1.standard_normal(i as u64, 0);
            prev = z;
        }
        let bound = 4.0 * (n as f64).sqrt();
        assert!(lag.abs() < bound, "lag-1 sum {lag}");
        assert!(lane.abs() < bound, "lane sum {lane}");
        assert!(cross.abs() < bound, "cross-path sum {cross}");
    }

    #[test]
    fn increments_fill_all_coordinates() {
        let s = NoiseStream::new(5, 0);
        for d in 1..6 {
            let mut out = vec![0.0; d];
            s.fill_increments(17, 0.1, &mut out);
            let distinct: Vec<u64> = out.iter().map(|v| v.to_bits()).collect();
            for i in 0..d {
                assert!(out[i].is_finite());
                for j in i + 1..d {
                    assert_ne!(distinct[i], distinct[j]);
                }
            }
        }
    }
}
