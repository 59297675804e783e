//! Strong-stability certificates and stabilizing controller synthesis.
//!
//! A controller K is (kappa, gamma)-strongly stable for (A, B) when
//! `||K|| <= kappa` and the closed loop factors as `A - B K = Q L Q^{-1}`
//! with `||L|| <= 1 - gamma` and `||Q|| ||Q^{-1}|| <= kappa`. Certificates
//! here come from an eigendecomposition of the closed loop: Q holds unit
//! eigenvectors, L the eigenvalues, gamma = 1 - (spectral radius), and
//! kappa = max(||K||, cond(Q), 1).
//!
//! The certified pair feeds every downstream bound, so defective closed
//! loops are refused instead of silently falling back to a looser factorization.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::linalg::{cond2_c, eig, spectral_norm, spectral_norm_c};

/// Nilpotent closed loops would give gamma = 1; clamp inside (0, 1).
const GAMMA_CLAMP: f64 = 1.0 - 1e-6;

/// Maximum eigenbasis condition number before the loop counts as defective.
const DEFECTIVE_COND: f64 = 1e8;

/// Reconstruction tolerance for `A_cl = Q L Q^{-1}`.
const RESIDUAL_TOL: f64 = 1e-8;

/// Riccati fixed-point iteration budget.
const RICCATI_SWEEPS: usize = 10_000;

/// Proof object for (kappa, gamma)-strong stability of a (possibly stacked)
/// controller `k` on the closed loop `a_cl = A - B K`.
#[derive(Clone, Debug)]
pub struct StabilityCertificate {
    pub kappa: f64,
    pub gamma: f64,
    /// Unit-column eigenvector matrix of the closed loop.
    pub q: DMatrix<Complex<f64>>,
    /// Diagonal eigenvalue matrix, `||lmat|| <= 1 - gamma`.
    pub lmat: DMatrix<Complex<f64>>,
    /// Measured reconstruction error `||a_cl - Q lmat Q^{-1}||`.
    pub residual: f64,
    /// The certified controller (stacked across agents for global certificates).
    pub k: DMatrix<f64>,
    /// The closed-loop matrix the certificate factors.
    pub a_cl: DMatrix<f64>,
}

impl StabilityCertificate {
    /// Re-checks every certificate inequality from the stored fields.
    pub fn validate(&self) -> Result<()> {
        let tol = 1e-9;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Numerical(format!(
                "gamma {} outside (0,1)",
                self.gamma
            )));
        }
        if self.kappa < 1.0 {
            return Err(Error::Numerical(format!("kappa {} below 1", self.kappa)));
        }
        let k_norm = spectral_norm(&self.k);
        if k_norm > self.kappa + tol {
            return Err(Error::Numerical(format!(
                "||K|| = {k_norm} exceeds kappa = {}",
                self.kappa
            )));
        }
        let cond = cond2_c(&self.q);
        if cond > self.kappa + tol {
            return Err(Error::Numerical(format!(
                "cond(Q) = {cond} exceeds kappa = {}",
                self.kappa
            )));
        }
        let l_norm = spectral_norm_c(&self.lmat);
        if l_norm > 1.0 - self.gamma + tol {
            return Err(Error::Numerical(format!(
                "||L|| = {l_norm} exceeds 1 - gamma = {}",
                1.0 - self.gamma
            )));
        }
        let qinv = self
            .q
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("certificate Q is singular".into()))?;
        let acl_c = self.a_cl.map(|v| Complex::new(v, 0.0));
        let residual = spectral_norm_c(&(&acl_c - &self.q * &self.lmat * qinv));
        if residual > RESIDUAL_TOL {
            return Err(Error::Numerical(format!(
                "reconstruction residual {residual} exceeds {RESIDUAL_TOL}"
            )));
        }
        Ok(())
    }

    /// Loosen the certificate to user-chosen constants.
    ///
    /// Strong stability is monotone: a (kappa, gamma)-certificate is also a
    /// (kappa', gamma')-certificate for any kappa' >= kappa and
    /// 0 < gamma' <= gamma, so loosening never needs recomputation.
    pub fn with_overrides(mut self, kappa: Option<f64>, gamma: Option<f64>) -> Result<Self> {
        if let Some(k) = kappa {
            if k < self.kappa {
                return Err(Error::Config(format!(
                    "kappa override {k} is tighter than certified {}",
                    self.kappa
                )));
            }
            self.kappa = k;
        }
        if let Some(g) = gamma {
            if !(g > 0.0) || g > self.gamma {
                return Err(Error::Config(format!(
                    "gamma override {g} must lie in (0, {}]",
                    self.gamma
                )));
            }
            self.gamma = g;
        }
        Ok(self)
    }
}

/// Deterministic eigenvector normalization: unit columns with the
/// largest-modulus entry rotated to the positive real axis.
fn normalize_columns(q: &mut DMatrix<Complex<f64>>) {
    let d = q.nrows();
    for j in 0..d {
        let mut col = q.column_mut(j);
        let norm = col.norm();
        if norm > 0.0 {
            col /= Complex::new(norm, 0.0);
        }
        let (mut pivot, mut best) = (Complex::new(1.0, 0.0), 0.0);
        for e in col.iter() {
            if e.norm() > best {
                best = e.norm();
                pivot = *e;
            }
        }
        if best > 0.0 {
            let phase = pivot / Complex::new(pivot.norm(), 0.0);
            for e in col.iter_mut() {
                *e /= phase;
            }
        }
    }
}

fn certify_closed_loop(a_cl: DMatrix<f64>, k: DMatrix<f64>) -> Result<StabilityCertificate> {
    let d = a_cl.nrows();
    let (vals, mut q) = eig(&a_cl);
    let rho = vals.iter().map(|l| l.norm()).fold(0.0, f64::max);
    if rho >= 1.0 {
        return Err(Error::NotStabilizing { rho });
    }
    normalize_columns(&mut q);
    let cond = cond2_c(&q);
    if !cond.is_finite() || cond > DEFECTIVE_COND {
        return Err(Error::DefectiveEigenbasis { cond });
    }
    let lmat = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            vals[i]
        } else {
            Complex::new(0.0, 0.0)
        }
    });
    let qinv = q
        .clone()
        .try_inverse()
        .ok_or(Error::DefectiveEigenbasis { cond })?;
    let acl_c = a_cl.map(|v| Complex::new(v, 0.0));
    let residual = spectral_norm_c(&(&acl_c - &q * &lmat * qinv));
    if residual > RESIDUAL_TOL {
        return Err(Error::Numerical(format!(
            "eigendecomposition residual {residual} exceeds {RESIDUAL_TOL}"
        )));
    }
    let gamma = (1.0 - rho).min(GAMMA_CLAMP);
    let kappa = spectral_norm(&k).max(cond).max(1.0);
    Ok(StabilityCertificate {
        kappa,
        gamma,
        q,
        lmat,
        residual,
        k,
        a_cl,
    })
}

/// Certify a single controller K on (A, B).
pub fn certify(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<StabilityCertificate> {
    let d = a.nrows();
    if a.ncols() != d || b.nrows() != d || k.ncols() != d || k.nrows() != b.ncols() {
        return Err(Error::Dimension {
            context: "certify",
            expected: format!("A {d}x{d}, B {d}xk, K kx{d}"),
            got: format!(
                "A {}x{}, B {}x{}, K {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                k.nrows(),
                k.ncols()
            ),
        });
    }
    certify_closed_loop(a - b * k, k.clone())
}

/// Certify the joint controller: stacks the K_i vertically, concatenates the
/// B_i horizontally, and certifies `A - sum_i B_i K_i`.
pub fn certify_global(
    a: &DMatrix<f64>,
    b_list: &[DMatrix<f64>],
    k_list: &[DMatrix<f64>],
) -> Result<StabilityCertificate> {
    let d = a.nrows();
    if b_list.len() != k_list.len() || b_list.is_empty() {
        return Err(Error::Dimension {
            context: "certify_global",
            expected: "matching nonempty B/K lists".into(),
            got: format!("{} vs {}", b_list.len(), k_list.len()),
        });
    }
    let k_total: usize = k_list.iter().map(|k| k.nrows()).sum();
    let mut b_cat = DMatrix::zeros(d, k_total);
    let mut k_stack = DMatrix::zeros(k_total, d);
    let mut off = 0;
    for (i, (bi, ki)) in b_list.iter().zip(k_list).enumerate() {
        if bi.nrows() != d || ki.ncols() != d || ki.nrows() != bi.ncols() {
            return Err(Error::Dimension {
                context: "certify_global agent",
                expected: format!("B_i {d}xk_i, K_i k_ix{d} (agent {i})"),
                got: format!(
                    "B {}x{}, K {}x{}",
                    bi.nrows(),
                    bi.ncols(),
                    ki.nrows(),
                    ki.ncols()
                ),
            });
        }
        b_cat.view_mut((0, off), (d, bi.ncols())).copy_from(bi);
        k_stack.view_mut((off, 0), (ki.nrows(), d)).copy_from(ki);
        off += bi.ncols();
    }
    certify_closed_loop(a - &b_cat * &k_stack, k_stack)
}

/// Synthesize a stabilizing K for (A, B) from the infinite-horizon discrete
/// Riccati equation with identity state/control weights, iterated to a fixed
/// point: `P <- I + A' P A - A' P B (I + B' P B)^{-1} B' P A`.
pub fn synthesize(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let k_dim = b.ncols();
    if a.ncols() != d || b.nrows() != d {
        return Err(Error::Dimension {
            context: "synthesize",
            expected: format!("A {d}x{d}, B {d}xk"),
            got: format!("A {}x{}, B {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        });
    }
    let eye_d = DMatrix::identity(d, d);
    let eye_k = DMatrix::identity(k_dim, k_dim);
    let mut p = eye_d.clone();
    for _ in 0..RICCATI_SWEEPS {
        let btp = b.transpose() * &p;
        let gain_lhs = &eye_k + &btp * b;
        let inv = gain_lhs
            .try_inverse()
            .ok_or_else(|| Error::Numerical("Riccati inner matrix is singular".into()))?;
        let next = &eye_d + a.transpose() * &p * a - a.transpose() * &p * b * &inv * &btp * a;
        let delta = spectral_norm(&(&next - &p));
        let scale = spectral_norm(&next).max(1.0);
        if !delta.is_finite() || scale > 1e12 {
            return Err(Error::SynthesisDiverged {
                sweeps: RICCATI_SWEEPS,
            });
        }
        p = next;
        if delta <= 1e-12 * scale {
            let btp = b.transpose() * &p;
            let inv = (&eye_k + &btp * b)
                .try_inverse()
                .ok_or_else(|| Error::Numerical("Riccati gain matrix is singular".into()))?;
            return Ok(inv * btp * a);
        }
    }
    Err(Error::SynthesisDiverged {
        sweeps: RICCATI_SWEEPS,
    })
}
