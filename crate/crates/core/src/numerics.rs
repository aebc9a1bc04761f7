//! Seeded random streams, 2-D vectors and matrices, and batch statistics.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tolerance below which a negative eigenvalue is treated as rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// A replayable random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// nonce, so distinct ids never share keystream. The position is an
/// explicit word counter and can be saved with [`RngStream::state`].
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Serializable snapshot of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub word_pos: u128,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream_id);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Two independent standard-normal draws (Box-Muller). Always consumes
    /// exactly two 64-bit words.
    pub fn gaussian_pair(&mut self) -> Vec2 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        Vec2::new(r * theta.cos(), r * theta.sin())
    }

    /// Derives an independent child stream; used to split one purpose seed
    /// into per-chain streams.
    pub fn child(seed: u64, purpose: u64, index: u64) -> Self {
        Self::new(
            seed.wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            index,
        )
    }
}

/// Free-function form of [`RngStream::gaussian_pair`].
pub fn gaussian_pair(rng: &mut RngStream) -> Vec2 {
    rng.gaussian_pair()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        Vec2::new(self * v.x, self * v.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Row-major 2×2 matrix `[[m00, m01], [m10, m11]]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub m: [f64; 4],
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 {
        m: [1.0, 0.0, 0.0, 1.0],
    };
    pub const ZERO: Mat2 = Mat2 { m: [0.0; 4] };

    pub const fn new(m00: f64, m01: f64, m10: f64, m11: f64) -> Self {
        Self {
            m: [m00, m01, m10, m11],
        }
    }

    pub const fn diag(a: f64, b: f64) -> Self {
        Self::new(a, 0.0, 0.0, b)
    }

    pub fn trace(&self) -> f64 {
        self.m[0] + self.m[3]
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[3] - self.m[1] * self.m[2]
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.m[0], self.m[2], self.m[1], self.m[3])
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_symmetric(&self) -> bool {
        (self.m[1] - self.m[2]).abs() <= 1e-12 * self.max_abs()
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        Mat2 {
            m: self.m.map(|v| v * s),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        let a = self.m[0];
        let d = self.m[3];
        let b = 0.5 * (self.m[1] + self.m[2]);
        let mean = 0.5 * (a + d);
        let r = (0.5 * (a - d)).hypot(b);
        (mean - r, mean + r)
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        Mat2 {
            m: [
                self.m[0] + o.m[0],
                self.m[1] + o.m[1],
                self.m[2] + o.m[2],
                self.m[3] + o.m[3],
            ],
        }
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        Mat2 {
            m: [
                self.m[0] - o.m[0],
                self.m[1] - o.m[1],
                self.m[2] - o.m[2],
                self.m[3] - o.m[3],
            ],
        }
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        let a = &self.m;
        let b = &o.m;
        Mat2::new(
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        )
    }
}

/// Principal square root of a symmetric positive-semidefinite 2×2 matrix.
///
/// Uses the closed form `(M + sqrt(det M)·I) / sqrt(tr M + 2·sqrt(det M))`
/// and falls back to an eigendecomposition when the denominator vanishes.
pub fn psd_sqrt(m: Mat2) -> Result<Mat2> {
    let (lo, _) = m.sym_eigenvalues();
    if lo < -PSD_TOLERANCE {
        return Err(LabError::NonPsdInput { eigenvalue: lo });
    }
    // Symmetrize so the result is exactly symmetric.
    let off = 0.5 * (m.m[1] + m.m[2]);
    let sym = Mat2::new(m.m[0], off, off, m.m[3]);
    let det = sym.det().max(0.0);
    let s = det.sqrt();
    let denom_sq = sym.trace() + 2.0 * s;
    if denom_sq > 0.0 && denom_sq.sqrt() >= 1e-12 {
        let t = denom_sq.sqrt();
        let r = Mat2::new(sym.m[0] + s, sym.m[1], sym.m[2], sym.m[3] + s).scale(1.0 / t);
        // The closed form loses accuracy when one eigenvalue is tiny relative
        // to the other; polish with the eigen route in that case.
        if (r * r - sym).frobenius() <= 1e-10 * sym.frobenius().max(1.0) {
            return Ok(r);
        }
    }
    Ok(eigen_sqrt(sym))
}

fn eigen_sqrt(sym: Mat2) -> Mat2 {
    let a = sym.m[0];
    let b = sym.m[1];
    let d = sym.m[3];
    let (l1, l2) = sym.sym_eigenvalues();
    let (s1, s2) = (l1.max(0.0).sqrt(), l2.max(0.0).sqrt());
    if b.abs() <= f64::MIN_POSITIVE {
        return Mat2::diag(a.max(0.0).sqrt(), d.max(0.0).sqrt());
    }
    // Eigenvector for l2: (b, l2 - a), normalized; l1's is orthogonal.
    let v = Vec2::new(b, l2 - a);
    let n = v.norm();
    let (c, s) = (v.x / n, v.y / n);
    // S = s2·v vᵀ + s1·w wᵀ with w = (-s, c).
    let m00 = s2 * c * c + s1 * s * s;
    let m01 = (s2 - s1) * c * s;
    let m11 = s2 * s * s + s1 * c * c;
    Mat2::new(m00, m01, m01, m11)
}

/// Unbiased sample mean and covariance.
pub fn batch_stats(points: &[Vec2]) -> Result<(Vec2, Mat2)> {
    let n = points.len();
    if n < 2 {
        return Err(LabError::TooFewPoints { needed: 2, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mean = inv_n * points.iter().fold(Vec2::ZERO, |acc, p| acc + *p);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = *p - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let k = 1.0 / (n - 1) as f64;
    Ok((mean, Mat2::new(sxx * k, sxy * k, sxy * k, syy * k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_pair_is_replayable() {
        let mut a = RngStream::new(0, 0);
        let mut b = RngStream::new(0, 0);
        assert_eq!(a.gaussian_pair(), b.gaussian_pair());
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn gaussian_pair_consumes_fixed_words() {
        let mut a = RngStream::new(3, 1);
        let before = a.state().word_pos;
        for _ in 0..100 {
            a.gaussian_pair();
        }
        assert_eq!(a.state().word_pos - before, 400); // 2 u64 = 4 words each
    }

    #[test]
    fn state_roundtrip_resumes_sequence() {
        let mut a = RngStream::new(9, 4);
        a.gaussian_pair();
        let mut b = RngStream::from_state(a.state());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(1, 0);
        let mut b = RngStream::new(1, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn gaussian_moments_million_draws() {
        let mut rng = RngStream::new(0, 7);
        let n = 1_000_000usize;
        let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let v = rng.gaussian_pair();
            sx += v.x;
            sy += v.y;
            sxx += v.x * v.x;
            syy += v.y * v.y;
        }
        let nf = n as f64;
        let (mx, my) = (sx / nf, sy / nf);
        assert!(mx.abs() < 0.01 && my.abs() < 0.01, "{mx} {my}");
        assert!((sxx / nf - mx * mx - 1.0).abs() < 0.01);
        assert!((syy / nf - my * my - 1.0).abs() < 0.01);
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = RngStream::new(5, 5);
        for _ in 0..1000 {
            assert!(rng.below(7) < 7);
        }
    }

    #[test]
    fn psd_sqrt_identity_and_diagonal() {
        assert_eq!(psd_sqrt(Mat2::IDENTITY).unwrap(), Mat2::IDENTITY);
        let s = psd_sqrt(Mat2::diag(4.0, 9.0)).unwrap();
        assert!((s - Mat2::diag(2.0, 3.0)).max_abs() < 1e-15);
    }

    #[test]
    fn psd_sqrt_zero_and_rank_one() {
        assert_eq!(psd_sqrt(Mat2::ZERO).unwrap(), Mat2::ZERO);
        let m = Mat2::new(1.0, 2.0, 2.0, 4.0);
        let s = psd_sqrt(m).unwrap();
        assert!((s * s - m).frobenius() < 1e-8);
    }

    #[test]
    fn psd_sqrt_clamps_tiny_negative() {
        let m = Mat2::diag(-1e-12, 1.0);
        let s = psd_sqrt(m).unwrap();
        assert!((s - Mat2::diag(0.0, 1.0)).max_abs() < 1e-6);
    }

    #[test]
    fn psd_sqrt_rejects_negative() {
        let err = psd_sqrt(Mat2::diag(-1e-3, 1.0)).unwrap_err();
        assert!(matches!(err, LabError::NonPsdInput { .. }));
    }

    #[test]
    fn batch_stats_two_points() {
        let (m, c) = batch_stats(&[Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0)]).unwrap();
        assert_eq!(m, Vec2::new(1.0, 0.0));
        assert_eq!(c, Mat2::new(2.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn batch_stats_identical_points() {
        let pts = vec![Vec2::new(1.5, -2.0); 10];
        let (_, c) = batch_stats(&pts).unwrap();
        assert_eq!(c, Mat2::ZERO);
    }

    #[test]
    fn batch_stats_too_few() {
        assert!(matches!(
            batch_stats(&[Vec2::ZERO]),
            Err(LabError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn batch_stats_standard_normal() {
        let mut rng = RngStream::new(11, 0);
        let pts: Vec<Vec2> = (0..100_000).map(|_| rng.gaussian_pair()).collect();
        let (m, c) = batch_stats(&pts).unwrap();
        assert!(m.norm() < 0.02);
        assert!((c - Mat2::IDENTITY).max_abs() < 0.02);
    }

    proptest! {
        #[test]
        fn psd_sqrt_reconstructs(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64, d in -5.0..5.0f64) {
            let x = Mat2::new(a, b, c, d);
            let m = x * x.transpose();
            let s = psd_sqrt(m).unwrap();
            prop_assert!((s * s - m).frobenius() <= 1e-8 * m.frobenius().max(1.0));
            prop_assert_eq!(s.m[1], s.m[2]);
            let (lo, _) = s.sym_eigenvalues();
            prop_assert!(lo >= -1e-9);
        }

        #[test]
        fn psd_sqrt_diagonal_idempotent(a in 0.0..100.0f64, b in 0.0..100.0f64) {
            let s = psd_sqrt(Mat2::diag(a * a, b * b)).unwrap();
            prop_assert!((s - Mat2::diag(a, b)).max_abs() <= 1e-9 * (a + b).max(1.0));
        }

        #[test]
        fn batch_stats_translation(dx in -10.0..10.0f64, dy in -10.0..10.0f64, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0);
            let pts: Vec<Vec2> = (0..50).map(|_| rng.gaussian_pair()).collect();
            let shift = Vec2::new(dx, dy);
            let moved: Vec<Vec2> = pts.iter().map(|p| *p + shift).collect();
            let (m0, c0) = batch_stats(&pts).unwrap();
            let (m1, c1) = batch_stats(&moved).unwrap();
            prop_assert!(((m1 - m0) - shift).norm() < 1e-12);
            prop_assert!((c1 - c0).max_abs() < 1e-12);
        }
    }
}
