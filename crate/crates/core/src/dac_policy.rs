//! Disturbance-action control (DAC) policies.
//!
//! A policy with memory H on top of a linear controller K plays
//!
//! ```text
//! u_t = -K x_t + sum_{p=1}^{H} M^{[p-1]} w_{t-p},
//! ```
//!
//! where `w` is the policy's disturbance signal (true or residual, per the
//! agent's information setting) and missing history reads as zero. The
//! feasible set bounds each block's spectral norm by `r_p = tau (1-gamma)^p`
//! with `tau = 2 kappa^2` from a strong-stability certificate; projection is
//! the exact Frobenius-metric projection onto those balls (singular value
//! clipping), as the gradient update requires.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::stability::StabilityCertificate;

/// Spectral-norm membership slack.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Ordered DAC parameter blocks `M^[0] .. M^[H-1]`, each k x d.
#[derive(Clone, Debug, PartialEq)]
pub struct DacParams {
    blocks: Vec<DMatrix<f64>>,
}

impl DacParams {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("DAC memory H must be >= 1".into()));
        }
        let (k, d) = (blocks[0].nrows(), blocks[0].ncols());
        if k == 0 || d == 0 {
            return Err(Error::Config("DAC blocks must be nonempty matrices".into()));
        }
        for (p, b) in blocks.iter().enumerate() {
            if b.nrows() != k || b.ncols() != d {
                return Err(Error::Dimension {
                    context: "DacParams blocks",
                    expected: format!("{k}x{d}"),
                    got: format!("{}x{} at block {p}", b.nrows(), b.ncols()),
                });
            }
        }
        Ok(Self { blocks })
    }

    pub fn zeros(h: usize, k: usize, d: usize) -> Self {
        Self {
            blocks: vec![DMatrix::zeros(k, d); h.max(1)],
        }
    }

    pub fn h(&self) -> usize {
        self.blocks.len()
    }

    pub fn control_dim(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.blocks[0].ncols()
    }

    /// Block `M^[p-1]` (zero-based index `p - 1`).
    pub fn block(&self, idx: usize) -> &DMatrix<f64> {
        &self.blocks[idx]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.blocks
    }

    /// `self + scale * other`, blockwise.
    pub fn add_scaled(&self, other: &DacParams, scale: f64) -> DacParams {
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a + b * scale)
            .collect();
        DacParams { blocks }
    }

    /// Frobenius norm over all blocks jointly.
    pub fn frobenius_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius_distance(&self, other: &DacParams) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Flat row-major dump `[block 0 rows.., block 1 rows..]` for export and
    /// for vector-space views of the parameters.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h() * self.control_dim() * self.state_dim());
        for b in &self.blocks {
            for r in 0..b.nrows() {
                for c in 0..b.ncols() {
                    out.push(b[(r, c)]);
                }
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64], h: usize, k: usize, d: usize) -> Result<Self> {
        if flat.len() != h * k * d {
            return Err(Error::Dimension {
                context: "DacParams::from_flat",
                expected: format!("{}", h * k * d),
                got: format!("{}", flat.len()),
            });
        }
        let mut blocks = Vec::with_capacity(h);
        for p in 0..h {
            let base = p * k * d;
            blocks.push(DMatrix::from_fn(k, d, |r, c| flat[base + r * d + c]));
        }
        DacParams::new(blocks)
    }
}

/// Which matrix norm bounds the feasible blocks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BallNorm {
    /// Operator-2 norm balls (the default reading of the feasible set).
    Spectral,
    /// Frobenius balls, kept as a sensitivity switch.
    Frobenius,
}

/// Feasible DAC set: block p-1 lives in the `r_p = tau (1-gamma)^p` ball.
#[derive(Clone, Debug)]
pub struct DacSet {
    h: usize,
    k: usize,
    d: usize,
    radii: Vec<f64>,
    kappa: f64,
    gamma: f64,
    norm: BallNorm,
}

impl DacSet {
    /// Standard set with `tau = 2 kappa^2` from a certificate.
    pub fn from_certificate(cert: &StabilityCertificate, h: usize, k: usize, d: usize) -> Result<Self> {
        Self::with_tau(2.0 * cert.kappa * cert.kappa, cert.kappa, cert.gamma, h, k, d)
    }

    /// Custom decay scale tau (bound-stress experiments).
    pub fn with_tau(tau: f64, kappa: f64, gamma: f64, h: usize, k: usize, d: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("DAC memory H must be >= 1".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) || !(tau > 0.0) || kappa < 1.0 {
            return Err(Error::Config(format!(
                "invalid DAC set constants: tau = {tau}, kappa = {kappa}, gamma = {gamma}"
            )));
        }
        let radii: Vec<f64> = (1..=h).map(|p| tau * (1.0 - gamma).powi(p as i32)).collect();
        Ok(Self {
            h,
            k,
            d,
            radii,
            kappa,
            gamma,
            norm: BallNorm::Spectral,
        })
    }

    pub fn with_norm(mut self, norm: BallNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn control_dim(&self) -> usize {
        self.k
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Per-block radii `r_1 .. r_H`.
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn zero_params(&self) -> DacParams {
        DacParams::zeros(self.h, self.k, self.d)
    }

    fn block_norm(&self, b: &DMatrix<f64>) -> f64 {
        match self.norm {
            BallNorm::Spectral => crate::linalg::spectral_norm(b),
            BallNorm::Frobenius => b.norm(),
        }
    }

    /// True iff every block norm is within its radius plus `1e-9` slack.
    pub fn membership(&self, m: &DacParams) -> bool {
        m.h() == self.h
            && m.control_dim() == self.k
            && m.state_dim() == self.d
            && m
                .blocks()
                .iter()
                .zip(&self.radii)
                .all(|(b, &r)| self.block_norm(b) <= r + MEMBERSHIP_TOL)
    }

    /// Exact Euclidean (Frobenius-metric) projection onto the set.
    ///
    /// Spectral balls: SVD per block with singular values clipped at the
    /// radius. Blocks already inside are returned bit-identical.
    pub fn project(&self, m: &DacParams) -> Result<DacParams> {
        if m.h() != self.h || m.control_dim() != self.k || m.state_dim() != self.d {
            return Err(Error::Dimension {
                context: "DacSet::project",
                expected: format!("H={} blocks of {}x{}", self.h, self.k, self.d),
                got: format!("H={} blocks of {}x{}", m.h(), m.control_dim(), m.state_dim()),
            });
        }
        let mut blocks = Vec::with_capacity(self.h);
        for (b, &r) in m.blocks().iter().zip(&self.radii) {
            if self.block_norm(b) <= r {
                blocks.push(b.clone());
                continue;
            }
            match self.norm {
                BallNorm::Frobenius => blocks.push(b * (r / b.norm())),
                BallNorm::Spectral => {
                    let svd = b
                        .clone()
                        .try_svd(true, true, f64::EPSILON, 1000)
                        .ok_or_else(|| Error::Numerical("SVD did not converge in projection".into()))?;
                    let u = svd.u.as_ref().expect("u requested");
                    let v_t = svd.v_t.as_ref().expect("v_t requested");
                    let clipped = svd.singular_values.map(|s| s.min(r));
                    blocks.push(u * DMatrix::from_diagonal(&clipped) * v_t);
                }
            }
        }
        DacParams::new(blocks)
    }

    /// Frobenius diameter bound of the whole set, `4 sqrt(2) kappa^2 / gamma`.
    pub fn diameter(&self) -> f64 {
        4.0 * std::f64::consts::SQRT_2 * self.kappa * self.kappa / self.gamma
    }

    /// Uniform-ish random feasible point (for sampling-based checks).
    pub fn sample(&self, rng: &mut impl Rng) -> DacParams {
        let blocks = self
            .radii
            .iter()
            .map(|&r| {
                let raw = DMatrix::from_fn(self.k, self.d, |_, _| rng.gen_range(-1.0..1.0));
                let n = self.block_norm(&raw);
                if n == 0.0 {
                    raw
                } else {
                    raw * (r * rng.gen_range(0.0..1.0f64) / n)
                }
            })
            .collect();
        DacParams { blocks }
    }
}

/// Disturbance history with zero-padding for rounds before the start.
///
/// `push` appends round `len()`'s signal; `lag(p)` reads the signal recorded
/// p pushes ago (zero vector if the history is shorter).
#[derive(Clone, Debug)]
pub struct DisturbanceBuffer {
    dim: usize,
    data: Vec<DVector<f64>>,
}

impl DisturbanceBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rounds recorded so far.
    pub fn rounds(&self) -> usize {
        self.data.len()
    }

    pub fn push(&mut self, w: DVector<f64>) {
        debug_assert_eq!(w.len(), self.dim);
        self.data.push(w);
    }

    /// Signal from `p` rounds before the next unrecorded round
    /// (`p = 1` is the most recent); zero if out of range.
    pub fn lag(&self, p: usize) -> DVector<f64> {
        if p == 0 || p > self.data.len() {
            DVector::zeros(self.dim)
        } else {
            self.data[self.data.len() - p].clone()
        }
    }

    /// Signal of absolute round `t`, zero for negative `t`.
    pub fn at(&self, t: isize) -> DVector<f64> {
        if t < 0 {
            DVector::zeros(self.dim)
        } else {
            self.data[t as usize].clone()
        }
    }

    /// Window `[s_{t_end}, s_{t_end - 1}, .., s_{t_end - len + 1}]` with zero
    /// padding below round 0.
    pub fn window_ending(&self, t_end: isize, len: usize) -> Vec<DVector<f64>> {
        (0..len).map(|l| self.at(t_end - l as isize)).collect()
    }
}

/// DAC control law `u = -K x + sum_{p=1}^H M^[p-1] buf.lag(p)`.
pub fn control(
    k: &DMatrix<f64>,
    m: &DacParams,
    buf: &DisturbanceBuffer,
    x: &DVector<f64>,
) -> DVector<f64> {
    let mut u = -(k * x);
    for p in 1..=m.h() {
        if p > buf.rounds() {
            break; // all remaining lags read as zero
        }
        u += m.block(p - 1) * buf.lag(p);
    }
    u
}
