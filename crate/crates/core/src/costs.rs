//! Per-round convex cost oracles with certified regularity constants.
//!
//! Every oracle exposes values and analytic gradients plus the constants the
//! regret/equilibrium machinery consumes, all parameterized by the ball
//! radius D on which they are claimed:
//!
//! * `quad_growth(D)` = beta with `|c| <= beta D^2` for `||x||, ||u|| <= D`,
//! * `grad_growth(D)` = G with `||grad_x||, ||grad_u|| <= G D`,
//! * `lipschitz(D)` = optional uniform Lipschitz constant on the ball,
//! * `smoothness()` = optional gradient-Lipschitz constant,
//! * `lower_bound()` = optional uniform lower bound on values.
//!
//! Constants are certified by construction (closed-form sups over the ball),
//! not estimated; the tests re-check them by sampling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds_core::{DisturbanceGenerator, DisturbanceKind};
use crate::linalg::stream_rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Max-over-ball increase of the cost between consecutive rounds,
/// `max_{||x||,||u|| <= D} c_{t+1}(x,u) - c_t(x,u)`.
///
/// `exact` marks a closed-form evaluation; otherwise the value is a sampled
/// lower estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaCost {
    pub value: f64,
    pub exact: bool,
}

/// Convex per-round cost `c_t(x, u)` with gradients and certified constants.
pub trait CostOracle: Send + Sync {
    fn dim_x(&self) -> usize;

    fn dim_u(&self) -> usize;

    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn grad_x(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn grad_u(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// beta: `|value| <= beta(D) * D^2` whenever `||x||, ||u|| <= D`.
    fn quad_growth(&self, d_ball: f64) -> f64;

    /// G: `||grad_x||, ||grad_u|| <= grad_growth(D) * D` on the same ball.
    fn grad_growth(&self, d_ball: f64) -> f64;

    /// Uniform Lipschitz constant of `(x,u) -> c` on the ball, if available.
    fn lipschitz(&self, _d_ball: f64) -> Option<f64> {
        None
    }

    /// Gradient-Lipschitz (smoothness) constant, if available.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    /// Uniform lower bound on values over all arguments, if one exists.
    fn lower_bound(&self) -> Option<f64> {
        None
    }

    /// True when `c_{t+1} = c_t` identically.
    fn time_invariant(&self) -> bool {
        false
    }

    /// True when every `c_t` is a (possibly degenerate) quadratic in `(x, u)`,
    /// i.e. both gradients are affine. Solvers may then fit an exact local
    /// model from gradient probes; they must still validate the result
    /// against the true gradient before trusting it.
    fn quadratic(&self) -> bool {
        false
    }

    /// Round-invariant second-order structure `(Hxx, Hxu, Huu)` with
    /// `c_t(x, u) = 1/2 [x; u]^T [Hxx Hxu; Hxu^T Huu] [x; u] + affine_t(x, u)`,
    /// for quadratic families whose curvature does not vary with `t` (the
    /// affine part may). Lets solvers assemble exact models in one pass;
    /// results must still be validated against the true gradient.
    fn quad_hessian(&self) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    /// Value plus both gradients in one call.
    fn eval(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (f64, DVector<f64>, DVector<f64>) {
        (self.value(t, x, u), self.grad_x(t, x, u), self.grad_u(t, x, u))
    }

    /// Per-round cost variation over the radius-D ball.
    ///
    /// The default is a sampled lower estimate over 10^4 paired sphere
    /// points; families with closed forms override it with exact values.
    fn delta_cost(&self, t: usize, d_ball: f64) -> DeltaCost {
        if self.time_invariant() {
            return DeltaCost {
                value: 0.0,
                exact: true,
            };
        }
        let mut rng = stream_rng(0xdc, &[t as u64]);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..10_000 {
            let x = sphere_point(self.dim_x(), d_ball, &mut rng);
            let u = sphere_point(self.dim_u(), d_ball, &mut rng);
            best = best.max(self.value(t + 1, &x, &u) - self.value(t, &x, &u));
        }
        DeltaCost {
            value: best,
            exact: false,
        }
    }
}

fn sphere_point(dim: usize, radius: f64, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v * (radius / n);
        }
    }
}

/// Tracking cost `c_t(x, u) = ||x - a_t||^2 + lambda ||u - b_t||^2` with
/// seeded target paths `a_t` (state space) and `b_t` (control space).
#[derive(Clone, Debug)]
pub struct QuadraticTracking {
    a_path: DisturbanceGenerator,
    b_path: DisturbanceGenerator,
    lambda: f64,
}

/// Tight sup-norm of a generator's emissions (per kind).
fn path_sup(gen: &DisturbanceGenerator) -> f64 {
    match gen.kind() {
        DisturbanceKind::ConstantVector { v } => DVector::from_column_slice(v).norm(),
        DisturbanceKind::ExplicitSequence { seq } => seq
            .iter()
            .map(|r| DVector::from_column_slice(r).norm())
            .fold(0.0, f64::max),
        DisturbanceKind::Sinusoidal { amplitude, .. }
        | DisturbanceKind::SignSwitching { amplitude, .. }
        | DisturbanceKind::BernoulliScalar { amplitude, .. } => amplitude.abs(),
        DisturbanceKind::ClippedGaussian { clip, .. } => *clip,
    }
}

impl QuadraticTracking {
    pub fn new(
        a_path: DisturbanceGenerator,
        b_path: DisturbanceGenerator,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "tracking weight must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self {
            a_path,
            b_path,
            lambda,
        })
    }

    /// Fixed targets `a`, `b` for all rounds.
    pub fn constant_targets(a: DVector<f64>, b: DVector<f64>, lambda: f64) -> Result<Self> {
        let bound_a = a.norm().max(1.0);
        let bound_b = b.norm().max(1.0);
        let a_path = DisturbanceGenerator::new(
            DisturbanceKind::ConstantVector {
                v: a.as_slice().to_vec(),
            },
            a.len(),
            bound_a,
            0,
        )?;
        let b_path = DisturbanceGenerator::new(
            DisturbanceKind::ConstantVector {
                v: b.as_slice().to_vec(),
            },
            b.len(),
            bound_b,
            0,
        )?;
        Self::new(a_path, b_path, lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn target_a(&self, t: usize) -> DVector<f64> {
        self.a_path.generate(t)
    }

    pub fn target_b(&self, t: usize) -> DVector<f64> {
        self.b_path.generate(t)
    }

    fn target_sup(&self) -> f64 {
        path_sup(&self.a_path).max(path_sup(&self.b_path))
    }
}

impl CostOracle for QuadraticTracking {
    fn dim_x(&self) -> usize {
        self.a_path.dim()
    }

    fn dim_u(&self) -> usize {
        self.b_path.dim()
    }

    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - self.target_a(t);
        let du = u - self.target_b(t);
        dx.norm_squared() + self.lambda * du.norm_squared()
    }

    fn grad_x(&self, t: usize, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        2.0 * (x - self.target_a(t))
    }

    fn grad_u(&self, t: usize, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        2.0 * self.lambda * (u - self.target_b(t))
    }

    fn quad_growth(&self, d_ball: f64) -> f64 {
        // |c| <= (D + S)^2 + lambda (D + S)^2 with S = sup target norm, so
        // beta = (1 + lambda)(1 + S/D)^2 certifies |c| <= beta D^2.
        let s = self.target_sup();
        (1.0 + self.lambda) * (1.0 + s / d_ball).powi(2)
    }

    fn grad_growth(&self, d_ball: f64) -> f64 {
        let sa = path_sup(&self.a_path);
        let sb = path_sup(&self.b_path);
        let gx = 2.0 * (1.0 + sa / d_ball);
        let gu = 2.0 * self.lambda * (1.0 + sb / d_ball);
        gx.max(gu)
    }

    fn lipschitz(&self, d_ball: f64) -> Option<f64> {
        let sa = path_sup(&self.a_path);
        let sb = path_sup(&self.b_path);
        let gx = 2.0 * (d_ball + sa);
        let gu = 2.0 * self.lambda * (d_ball + sb);
        Some((gx * gx + gu * gu).sqrt())
    }

    fn smoothness(&self) -> Option<f64> {
        Some(2.0 * self.lambda.max(1.0))
    }

    fn lower_bound(&self) -> Option<f64> {
        Some(0.0)
    }

    fn time_invariant(&self) -> bool {
        matches!(self.a_path.kind(), DisturbanceKind::ConstantVector { .. })
            && matches!(self.b_path.kind(), DisturbanceKind::ConstantVector { .. })
    }

    fn quadratic(&self) -> bool {
        true
    }

    fn quad_hessian(&self) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let dx = self.dim_x();
        let du = self.dim_u();
        Some((
            DMatrix::identity(dx, dx) * 2.0,
            DMatrix::zeros(dx, du),
            DMatrix::identity(du, du) * (2.0 * self.lambda),
        ))
    }

    fn delta_cost(&self, t: usize, d_ball: f64) -> DeltaCost {
        // c_{t+1} - c_t = -2 x . (a' - a) + ||a'||^2 - ||a||^2 + lambda (...),
        // affine in (x, u), so the exact max over the product ball is
        // attained at the boundary in the direction of each difference.
        let a = self.target_a(t);
        let ap = self.target_a(t + 1);
        let b = self.target_b(t);
        let bp = self.target_b(t + 1);
        let v = 2.0 * d_ball * (&ap - &a).norm() + ap.norm_squared() - a.norm_squared()
            + self.lambda
                * (2.0 * d_ball * (&bp - &b).norm() + bp.norm_squared() - b.norm_squared());
        DeltaCost {
            value: v,
            exact: true,
        }
    }
}

/// Scalar adversarial cost `c_t(x, u) = u (b_t - 1/2) + 1/2` with an i.i.d.
/// fair-coin sequence `b_t in {0, 1}`; independent of the state.
#[derive(Clone, Debug)]
pub struct LowerBoundCost {
    dim_x: usize,
    seed: u64,
}

impl LowerBoundCost {
    pub fn new(dim_x: usize, seed: u64) -> Self {
        Self { dim_x, seed }
    }

    /// The coin `b_t`.
    pub fn bit(&self, t: usize) -> f64 {
        let mut rng = stream_rng(self.seed, &[0x03, t as u64]);
        if rng.gen_bool(0.5) {
            1.0
        } else {
            0.0
        }
    }

    /// Centered coin `b_t - 1/2`, the per-round cost slope.
    pub fn eps(&self, t: usize) -> f64 {
        self.bit(t) - 0.5
    }

    /// Cost under a forced coin value, for symbolic expectation checks.
    pub fn value_with_bit(bit: f64, u: f64) -> f64 {
        u * (bit - 0.5) + 0.5
    }
}

impl CostOracle for LowerBoundCost {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_u(&self) -> usize {
        1
    }

    fn value(&self, t: usize, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        Self::value_with_bit(self.bit(t), u[0])
    }

    fn grad_x(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim_x)
    }

    fn grad_u(&self, t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.eps(t))
    }

    fn quad_growth(&self, d_ball: f64) -> f64 {
        (0.5 * d_ball + 0.5) / (d_ball * d_ball)
    }

    fn grad_growth(&self, d_ball: f64) -> f64 {
        0.5 / d_ball
    }

    fn lipschitz(&self, _d_ball: f64) -> Option<f64> {
        Some(0.5)
    }

    fn smoothness(&self) -> Option<f64> {
        Some(0.0)
    }

    fn quadratic(&self) -> bool {
        true
    }

    fn quad_hessian(&self) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        Some((
            DMatrix::zeros(self.dim_x, self.dim_x),
            DMatrix::zeros(self.dim_x, 1),
            DMatrix::zeros(1, 1),
        ))
    }

    fn delta_cost(&self, t: usize, d_ball: f64) -> DeltaCost {
        // c_{t+1} - c_t = u (b_{t+1} - b_t); the ball max is D |b_{t+1} - b_t|.
        DeltaCost {
            value: d_ball * (self.bit(t + 1) - self.bit(t)).abs(),
            exact: true,
        }
    }
}
