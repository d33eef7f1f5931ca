//! Complex linear algebra, seeded random number generation, and a
//! finite-difference gradient oracle.
//!
//! Only the operations the pipeline needs; this is not a general-purpose
//! linear algebra surface. Everything is double precision. Least squares
//! goes through an SVD rather than explicit normal equations.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Relative singular-value cutoff below which a matrix is treated as
/// rank deficient.
pub const RANK_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Complex vector
// ---------------------------------------------------------------------------

/// Owned complex vector. Length is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CVec {
    data: Vec<C64>,
}

impl CVec {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![C64::new(0.0, 0.0); len] }
    }

    pub fn from_vec(data: Vec<C64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Hermitian inner product `sum_i conj(self_i) * other_i`.
    pub fn inner(&self, other: &CVec) -> C64 {
        assert_eq!(self.len(), other.len(), "inner: length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn add(&self, other: &CVec) -> CVec {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        CVec::from_vec(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &CVec) -> CVec {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        CVec::from_vec(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: C64) -> CVec {
        CVec::from_vec(self.data.iter().map(|z| z * factor).collect())
    }
}

impl std::ops::Index<usize> for CVec {
    type Output = C64;
    fn index(&self, i: usize) -> &C64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for CVec {
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Complex matrix
// ---------------------------------------------------------------------------

/// Owned complex matrix, row-major. Dimensions are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matvec(&self, x: &CVec) -> CVec {
        assert_eq!(self.cols, x.len(), "matvec: dimension mismatch");
        let mut out = CVec::zeros(self.rows);
        for i in 0..self.rows {
            let mut acc = C64::new(0.0, 0.0);
            for (a, b) in self.row(i).iter().zip(x.as_slice()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        assert_eq!(self.cols, other.rows, "matmul: dimension mismatch");
        let mut out = CMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add: dimension mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        CMat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub: dimension mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        CMat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, factor: C64) -> CMat {
        CMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * factor).collect() }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn to_na(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// ---------------------------------------------------------------------------
// Seeded RNG
// ---------------------------------------------------------------------------

/// Deterministic random stream.
///
/// Backed by ChaCha8 seeded from a 64-bit key (SplitMix64 expansion, as
/// documented by `rand_core`), so identical seeds produce identical streams
/// on every platform. Gaussian variates come from Box-Muller applied to the
/// raw 64-bit output, with no dependence on external distribution crates.
///
/// Child streams are derived by hashing the *root* seed together with a
/// string key (FNV-1a 64), so `rng.child("x")` is reproducible and
/// independent of how much of the parent stream has been consumed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// The seed this stream was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream keyed by `key`.
    pub fn child(&self, key: &str) -> Rng {
        let child_seed = fnv1a64(self.seed.to_le_bytes().into_iter().chain(key.bytes()));
        Rng::from_seed(child_seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform double in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 1.0) * (1.0 / 9007199254740992.0)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal variate (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Circularly symmetric complex Gaussian with total variance `variance`
    /// (real and imaginary parts each carry `variance / 2`).
    pub fn complex_gaussian(&mut self, variance: f64) -> C64 {
        let s = (variance / 2.0).sqrt();
        C64::new(s * self.normal(), s * self.normal())
    }
}

/// Matrix with i.i.d. circularly symmetric complex Gaussian entries of
/// per-entry total variance `variance`.
pub fn sample_complex_gaussian(rng: &mut Rng, rows: usize, cols: usize, variance: f64) -> Result<CMat> {
    if !(variance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "complex Gaussian variance must be positive, got {variance}"
        )));
    }
    let mut m = CMat::zeros(rows, cols);
    for entry in m.as_mut_slice() {
        *entry = rng.complex_gaussian(variance);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// Minimum-residual solution of `A x = b` for full-column-rank `A` with
/// `rows >= cols`, via SVD. Rank deficiency (smallest/largest singular value
/// below [`RANK_TOL`]) is an error.
pub fn solve_least_squares(a: &CMat, b: &CVec) -> Result<CVec> {
    assert!(a.rows() >= a.cols(), "solve_least_squares requires rows >= cols");
    assert_eq!(a.rows(), b.len(), "solve_least_squares: rhs length mismatch");
    let na = a.to_na();
    let svd = na.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin / smax < RANK_TOL {
        return Err(Error::SingularMatrix { ratio: if smax == 0.0 { 0.0 } else { smin / smax } });
    }
    let nb = DMatrix::from_fn(b.len(), 1, |i, _| b[i]);
    let sol = svd
        .solve(&nb, smax * 1e-14)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(CVec::from_vec((0..a.cols()).map(|i| sol[(i, 0)]).collect()))
}

/// Singular-value ratio sigma_min / sigma_max, used by callers that need a
/// rank probe without solving.
pub fn rank_ratio(a: &CMat) -> f64 {
    let svd = a.to_na().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0.0;
    }
    svd.singular_values.min() / smax
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar field: component i is
/// `(f(x + h e_i) - f(x - h e_i)) / (2 h)`.
///
/// This is the independent oracle every analytic gradient in the crate is
/// checked against; it must stay free of any analytic gradient code.
pub fn finite_diff_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite_diff_gradient requires h > 0");
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative L2 error between an analytic gradient and its finite-difference
/// estimate. Returns the absolute error when the reference is zero.
pub fn gradient_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn complex_gaussian_variance_law_of_large_numbers() {
        let mut rng = Rng::from_seed(7);
        let m = sample_complex_gaussian(&mut rng, 100, 100, 1.0).unwrap();
        let mean_power: f64 =
            m.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>() / (100.0 * 100.0);
        assert!(mean_power > 0.94 && mean_power < 1.06, "mean power {mean_power}");
    }

    #[test]
    fn complex_gaussian_rejects_nonpositive_variance() {
        let mut rng = Rng::from_seed(1);
        assert!(matches!(
            sample_complex_gaussian(&mut rng, 2, 2, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            sample_complex_gaussian(&mut rng, 2, 2, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_seed_same_matrix() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        let ma = sample_complex_gaussian(&mut a, 3, 5, 2.0).unwrap();
        let mb = sample_complex_gaussian(&mut b, 3, 5, 2.0).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn child_streams_are_keyed_and_reproducible() {
        let root = Rng::from_seed(9);
        let mut a1 = root.child("alpha");
        let mut a2 = root.child("alpha");
        let mut b = root.child("beta");
        let x1 = a1.next_u64();
        assert_eq!(x1, a2.next_u64());
        assert_ne!(x1, b.next_u64());
        // Derivation depends on the root seed, not on consumed state.
        let mut consumed = Rng::from_seed(9);
        consumed.next_u64();
        assert_eq!(consumed.child("alpha").next_u64(), x1);
    }

    #[test]
    fn lstsq_identity() {
        let a = CMat::identity(2);
        let b = CVec::from_vec(vec![c(1.0, 0.0), c(2.0, 0.0)]);
        let x = solve_least_squares(&a, &b).unwrap();
        assert!((x[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((x[1] - c(2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn lstsq_diagonal() {
        let mut a = CMat::zeros(2, 2);
        a[(0, 0)] = c(2.0, 0.0);
        a[(1, 1)] = c(4.0, 0.0);
        let b = CVec::from_vec(vec![c(2.0, 0.0), c(4.0, 0.0)]);
        let x = solve_least_squares(&a, &b).unwrap();
        assert!((x[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((x[1] - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn lstsq_construct_then_recover() {
        let mut rng = Rng::from_seed(11);
        let a = sample_complex_gaussian(&mut rng, 4, 2, 1.0).unwrap();
        let x0 = CVec::from_vec(vec![c(0.3, -1.2), c(-0.7, 0.4)]);
        let b = a.matvec(&x0);
        let x = solve_least_squares(&a, &b).unwrap();
        assert!((x[0] - x0[0]).norm() < 1e-10);
        assert!((x[1] - x0[1]).norm() < 1e-10);
    }

    #[test]
    fn lstsq_rank_deficient_errors() {
        // Two identical columns.
        let a = CMat::from_fn(3, 2, |i, _| c(i as f64 + 1.0, -0.5));
        let b = CVec::zeros(3);
        assert!(matches!(solve_least_squares(&a, &b), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn lstsq_residual_orthogonal_to_column_space() {
        for seed in 0..10u64 {
            let mut rng = Rng::from_seed(100 + seed);
            let a = sample_complex_gaussian(&mut rng, 6, 3, 1.0).unwrap();
            let b = CVec::from_vec((0..6).map(|_| rng.complex_gaussian(1.0)).collect());
            let x = solve_least_squares(&a, &b).unwrap();
            let resid = a.matvec(&x).sub(&b);
            let proj = a.hermitian().matvec(&resid);
            assert!(proj.norm() < 1e-9 * b.norm(), "seed {seed}: {}", proj.norm());
        }
    }

    #[test]
    fn hermitian_adjoint_identity() {
        let mut rng = Rng::from_seed(5);
        let a = sample_complex_gaussian(&mut rng, 4, 3, 1.0).unwrap();
        let x = CVec::from_vec((0..3).map(|_| rng.complex_gaussian(1.0)).collect());
        let y = CVec::from_vec((0..4).map(|_| rng.complex_gaussian(1.0)).collect());
        // <A x, y> == <x, A^H y>
        let lhs = a.matvec(&x).inner(&y);
        let rhs = x.inner(&a.hermitian().matvec(&y));
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn finite_diff_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_gradient(&f, &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let f = |_: &[f64]| 3.5;
        let g = finite_diff_gradient(&f, &[0.1, -0.2, 0.3], 1e-5);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        // proptest's prelude re-exports a `Rng` trait; ours wins here.
        use super::Rng;

        proptest! {
            /// Least-squares residual is orthogonal to the column space for
            /// any seeded full-rank system.
            #[test]
            fn residual_orthogonality(seed in 0u64..1_000_000, rows in 2usize..9, extra in 0usize..3) {
                let cols = rows.saturating_sub(1 + extra).max(1);
                let mut rng = Rng::from_seed(seed);
                let a = sample_complex_gaussian(&mut rng, rows, cols, 1.0).unwrap();
                let b = CVec::from_vec((0..rows).map(|_| rng.complex_gaussian(1.0)).collect());
                // Seeded Gaussian matrices are full rank almost surely; skip
                // the measure-zero exceptions rather than fail.
                if let Ok(x) = solve_least_squares(&a, &b) {
                    let resid = a.matvec(&x).sub(&b);
                    let proj = a.hermitian().matvec(&resid);
                    prop_assert!(proj.norm() < 1e-9 * b.norm());
                }
            }

            /// `<A x, y> == <x, A^H y>` to 1e-12 relative error.
            #[test]
            fn adjoint_identity(seed in 0u64..1_000_000) {
                let mut rng = Rng::from_seed(seed);
                let a = sample_complex_gaussian(&mut rng, 5, 3, 1.0).unwrap();
                let x = CVec::from_vec((0..3).map(|_| rng.complex_gaussian(1.0)).collect());
                let y = CVec::from_vec((0..5).map(|_| rng.complex_gaussian(1.0)).collect());
                let lhs = a.matvec(&x).inner(&y);
                let rhs = x.inner(&a.hermitian().matvec(&y));
                prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
            }
        }
    }
}
