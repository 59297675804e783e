//! Small shared numerical helpers: spectral norms, eigendecomposition,
//! seeded RNG derivation, and float formatting for reproducible CSV output.

use faer::complex_native::c64;
use faer::linalg::solvers::Eigendecomposition;
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest singular value of a real matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Largest singular value of a complex matrix.
pub fn spectral_norm_c(m: &DMatrix<Complex<f64>>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Two-norm condition number of a complex matrix (inf if singular).
pub fn cond2_c(m: &DMatrix<Complex<f64>>) -> f64 {
    let sv = m.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Eigenvalues and right eigenvectors of a real square matrix.
///
/// Wraps a dense nonsymmetric eigendecomposition; columns of the returned
/// matrix are unit-scaled eigenvectors matching the eigenvalue order.
pub fn eig(m: &DMatrix<f64>) -> (Vec<Complex<f64>>, DMatrix<Complex<f64>>) {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "eig expects a square matrix");
    let fm = faer::Mat::<f64>::from_fn(d, d, |i, j| m[(i, j)]);
    let evd: Eigendecomposition<c64> = fm.eigendecomposition();
    let s = evd.s();
    let u = evd.u();
    let vals: Vec<Complex<f64>> = (0..d)
        .map(|i| {
            let l = s.column_vector().read(i);
            Complex::new(l.re, l.im)
        })
        .collect();
    let vecs = DMatrix::from_fn(d, d, |i, j| {
        let e = u.read(i, j);
        Complex::new(e.re, e.im)
    });
    (vals, vecs)
}

/// SplitMix64 step; a strong 64-bit mixer used to derive stream seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of indices.
///
/// Hierarchical and order-sensitive, so (seed, [trial, round]) streams never
/// collide with (seed, [round, trial]) streams.
pub fn subseed(master: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0xa076_1d64_78bd_642f);
    for &p in path {
        s = splitmix64(s ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(master, path))
}

/// Estimate the largest eigenvalue of a symmetric PSD operator given only
/// matrix-vector products, via power iteration from a seeded random start.
pub fn power_iteration<F>(dim: usize, iters: usize, seed: u64, mut apply: F) -> f64
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut rng = stream_rng(seed, &[0x9077]);
    let mut v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    let n = v.norm();
    if n == 0.0 || dim == 0 {
        return 0.0;
    }
    v /= n;
    let mut lambda = 0.0;
    for _ in 0..iters {
        let av = apply(&v);
        lambda = v.dot(&av).abs();
        let n = av.norm();
        if n <= 1e-300 {
            return 0.0;
        }
        v = av / n;
    }
    lambda
}

/// Ordinary least-squares slope of y against x.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    sxy / sxx
}

/// Format a float with 17 significant digits so round-tripping is exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
