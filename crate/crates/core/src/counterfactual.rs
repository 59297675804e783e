//! Transfer operators, ideal (counterfactual) states and actions, surrogate
//! losses with analytic gradients, and the certified bound suite.
//!
//! For a closed loop `A_cl` and control channels `B_1..B_C` carrying DAC
//! parameters, the disturbance-to-state transfer matrix at lag `l` is
//!
//! ```text
//! Psi^h_{t,l} = A_cl^l 1{l <= h}
//!             + sum_{k=0}^{h} A_cl^k sum_c B_c M_{c,t-k}^[l-k-1] 1{l-k in [1,H]},
//! ```
//!
//! and the ideal state anchored at round t is
//! `y_t = sum_{l=0}^{2H} Psi^H_{t-1,l} w_{t-1-l}` for a zero state H+1 rounds
//! back. Two disturbance windows are kept separate throughout: the `env`
//! window drives the autonomous `A_cl^l` terms and the `signal` window feeds
//! the DAC blocks. Information settings differ only in what those windows
//! hold (the global and own-residual forms use one sequence for both; the
//! shared-disturbance agent mixes its residual into `env` and the true
//! disturbance into `signal`), so a single implementation serves all three.
//!
//! Index conventions used by every operation here:
//! * parameter windows are lists `window[k][c]` = channel c's DAC blocks k
//!   rounds before the anchor;
//! * disturbance windows are lists `w[l]` = the disturbance l rounds before
//!   the anchor (so for an anchor at t-1, `w[l] = w_{t-1-l}`).

use nalgebra::{DMatrix, DVector};

use crate::costs::CostOracle;
use crate::dac_policy::DacParams;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// Closed-loop transfer context: cached powers of `A_cl` and the control
/// channels whose DAC parameters enter the transfer sums.
#[derive(Clone, Debug)]
pub struct TransferStack {
    a_cl: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    h: usize,
    /// `powers[l] = A_cl^l` for `l = 0..=2H+1`.
    powers: Vec<DMatrix<f64>>,
}

impl TransferStack {
    pub fn new(a_cl: DMatrix<f64>, b: Vec<DMatrix<f64>>, h: usize) -> Result<Self> {
        let d = a_cl.nrows();
        if a_cl.ncols() != d || d == 0 {
            return Err(Error::Dimension {
                context: "TransferStack closed loop",
                expected: "square".into(),
                got: format!("{}x{}", a_cl.nrows(), a_cl.ncols()),
            });
        }
        if h == 0 {
            return Err(Error::Config("transfer stack needs H >= 1".into()));
        }
        if b.is_empty() {
            return Err(Error::Config("transfer stack needs >= 1 channel".into()));
        }
        for (c, bc) in b.iter().enumerate() {
            if bc.nrows() != d {
                return Err(Error::Dimension {
                    context: "TransferStack channel",
                    expected: format!("{d} rows"),
                    got: format!("{} rows at channel {c}", bc.nrows()),
                });
            }
        }
        let mut powers = Vec::with_capacity(2 * h + 2);
        powers.push(DMatrix::identity(d, d));
        for l in 1..=(2 * h + 1) {
            let next = &a_cl * &powers[l - 1];
            powers.push(next);
        }
        Ok(Self { a_cl, b, h, powers })
    }

    pub fn dim(&self) -> usize {
        self.a_cl.nrows()
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn channels(&self) -> usize {
        self.b.len()
    }

    pub fn a_cl(&self) -> &DMatrix<f64> {
        &self.a_cl
    }

    pub fn channel(&self, c: usize) -> &DMatrix<f64> {
        &self.b[c]
    }

    /// Cached `A_cl^l`, `l <= 2H+1`.
    pub fn power(&self, l: usize) -> &DMatrix<f64> {
        &self.powers[l]
    }

    pub fn sum_channel_norms(&self) -> f64 {
        self.b.iter().map(spectral_norm).sum()
    }

    pub fn max_channel_norm(&self) -> f64 {
        self.b.iter().map(spectral_norm).fold(0.0, f64::max)
    }

    fn check_params(&self, m: &DacParams, c: usize) -> Result<()> {
        if m.h() != self.h || m.state_dim() != self.dim() || m.control_dim() != self.b[c].ncols() {
            return Err(Error::Dimension {
                context: "TransferStack params",
                expected: format!("H={}, {}x{}", self.h, self.b[c].ncols(), self.dim()),
                got: format!("H={}, {}x{}", m.h(), m.control_dim(), m.state_dim()),
            });
        }
        Ok(())
    }

    /// `Psi^h_{anchor,l}` for the given parameter window
    /// (`window[k][c]` = channel c's blocks k rounds before the anchor).
    pub fn psi(&self, window: &[Vec<DacParams>], l: usize, h: usize) -> Result<DMatrix<f64>> {
        if l > self.h + h || h > self.h || window.len() < h + 1 {
            return Err(Error::Config(format!(
                "psi index out of range: l = {l}, h = {h}, H = {}, window = {}",
                self.h,
                window.len()
            )));
        }
        self.psi_impl(&|k, c| &window[k][c], l, h)
    }

    /// `Psi^h` when every slot holds the same per-channel parameters.
    pub fn psi_stationary(&self, params: &[DacParams], l: usize, h: usize) -> Result<DMatrix<f64>> {
        if l > self.h + h || h > self.h {
            return Err(Error::Config(format!(
                "psi index out of range: l = {l}, h = {h}, H = {}",
                self.h
            )));
        }
        self.psi_impl(&|_, c| &params[c], l, h)
    }

    fn psi_impl<'w>(
        &self,
        param_at: &dyn Fn(usize, usize) -> &'w DacParams,
        l: usize,
        h: usize,
    ) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut out = if l <= h {
            self.powers[l].clone()
        } else {
            DMatrix::zeros(d, d)
        };
        for k in 0..=h {
            // the M exponent is l - k - 1 and must lie in [0, H-1]
            if l < k + 1 {
                continue;
            }
            let p_idx = l - k - 1;
            if p_idx >= self.h {
                continue;
            }
            let mut mix = DMatrix::zeros(d, d);
            for c in 0..self.b.len() {
                let m = param_at(k, c);
                self.check_params(m, c)?;
                mix += &self.b[c] * m.block(p_idx);
            }
            out += &self.powers[k] * mix;
        }
        Ok(out)
    }

    /// State evolution over h+1 rounds: reconstructs `x_{t+1}` from
    /// `x_{t-h}` via `A_cl^{h+1} x_{t-h} + sum_{l=0}^{H+h} Psi^h_{t,l} w_{t-l}`,
    /// with the parameter window anchored at t and `w[l] = w_{t-l}`.
    pub fn unroll_state(
        &self,
        window: &[Vec<DacParams>],
        h: usize,
        x_start: &DVector<f64>,
        w: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        if w.len() < self.h + h + 1 {
            return Err(Error::Config(format!(
                "unroll_state needs H+h+1 = {} disturbances, got {}",
                self.h + h + 1,
                w.len()
            )));
        }
        let mut x = &self.powers[h + 1] * x_start;
        for l in 0..=(self.h + h) {
            x += self.psi(window, l, h)? * &w[l];
        }
        Ok(x)
    }

    /// Ideal state `y` anchored one round back: with the parameter window
    /// anchored at t-1 and both disturbance windows indexed `w[l] = w_{t-1-l}`
    /// for `l = 0..=2H`, returns `sum_l Psi^H_{t-1,l}`-style contributions
    /// where the autonomous terms read `env` and the DAC terms read `signal`.
    pub fn ideal_state(
        &self,
        window: &[Vec<DacParams>],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        if window.len() < self.h + 1 {
            return Err(Error::Config(format!(
                "ideal_state needs H+1 = {} parameter slots, got {}",
                self.h + 1,
                window.len()
            )));
        }
        self.ideal_state_impl(&|k, c| &window[k][c], env, signal)
    }

    /// Ideal state with one stationary parameter per channel.
    pub fn ideal_state_stationary(
        &self,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        self.ideal_state_impl(&|_, c| &params[c], env, signal)
    }

    fn check_windows(&self, env: &[DVector<f64>], signal: &[DVector<f64>]) -> Result<()> {
        if env.len() < self.h + 1 || signal.len() < 2 * self.h + 1 {
            return Err(Error::Config(format!(
                "ideal_state windows too short: env {} (need {}), signal {} (need {})",
                env.len(),
                self.h + 1,
                signal.len(),
                2 * self.h + 1
            )));
        }
        Ok(())
    }

    fn ideal_state_impl<'w>(
        &self,
        param_at: &dyn Fn(usize, usize) -> &'w DacParams,
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        self.check_windows(env, signal)?;
        let d = self.dim();
        let h = self.h;
        let mut y = DVector::zeros(d);
        // Autonomous part: sum_{l=0}^{H} A_cl^l env[l].
        for l in 0..=h {
            y += &self.powers[l] * &env[l];
        }
        // DAC part: sum_{k=0}^{H} A_cl^k sum_c B_c sum_{p=1}^{H}
        //   M_{c, anchor-k}^[p-1] signal[k+p].
        for k in 0..=h {
            let mut drive = DVector::zeros(d);
            for c in 0..self.b.len() {
                let m = param_at(k, c);
                self.check_params(m, c)?;
                let mut mk = DVector::zeros(self.b[c].ncols());
                for p in 1..=h {
                    mk += m.block(p - 1) * &signal[k + p];
                }
                drive += &self.b[c] * mk;
            }
            y += &self.powers[k] * drive;
        }
        Ok(y)
    }

    /// Second route to the ideal state: a zero-initialized rollout of
    /// `x <- A_cl x + sum_c B_c (DAC drive) + env` over H+1 rounds.
    pub fn ideal_state_rollout(
        &self,
        window: &[Vec<DacParams>],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        if window.len() < self.h + 1 {
            return Err(Error::Config("rollout window too short".into()));
        }
        self.ideal_state_rollout_impl(&|k, c| &window[k][c], env, signal)
    }

    pub fn ideal_state_rollout_stationary(
        &self,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        self.ideal_state_rollout_impl(&|_, c| &params[c], env, signal)
    }

    fn ideal_state_rollout_impl<'w>(
        &self,
        param_at: &dyn Fn(usize, usize) -> &'w DacParams,
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        self.check_windows(env, signal)?;
        let d = self.dim();
        let h = self.h;
        let mut y = DVector::zeros(d);
        // March forward from the zero state h+1 rounds back (oldest slot
        // first): slot l holds the drive applied at anchor - l.
        for l in (0..=h).rev() {
            let mut drive = env[l].clone();
            for c in 0..self.b.len() {
                let m = param_at(l, c);
                self.check_params(m, c)?;
                let mut mk = DVector::zeros(self.b[c].ncols());
                for p in 1..=h {
                    mk += m.block(p - 1) * &signal[l + p];
                }
                drive += &self.b[c] * mk;
            }
            y = &self.a_cl * y + drive;
        }
        Ok(y)
    }

    /// Transfer-route ideal state cross-checked against the rollout route;
    /// returns the state and the measured route discrepancy.
    pub fn ideal_state_checked(
        &self,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<(DVector<f64>, f64)> {
        let a = self.ideal_state_stationary(params, env, signal)?;
        let b = self.ideal_state_rollout_stationary(params, env, signal)?;
        Ok(((a.clone()), (a - b).norm()))
    }
}

/// Replicate one parameter set per channel across `len` window slots.
pub fn stationary_window(params: &[DacParams], len: usize) -> Vec<Vec<DacParams>> {
    (0..len).map(|_| params.to_vec()).collect()
}

/// Ideal state, ideal action, surrogate loss value, and (optionally) the
/// analytic gradient with respect to the evaluating channel's blocks.
#[derive(Clone, Debug)]
pub struct SurrogateEval {
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    pub loss: f64,
    pub grad: Option<DacParams>,
}

/// Ideal action `v = -K_i y + sum_{p=1}^H M_i^[p-1] signal[p-1]`.
pub fn ideal_action(
    k_i: &DMatrix<f64>,
    m_i: &DacParams,
    y: &DVector<f64>,
    signal: &[DVector<f64>],
) -> DVector<f64> {
    let mut v = -(k_i * y);
    for p in 1..=m_i.h() {
        v += m_i.block(p - 1) * &signal[p - 1];
    }
    v
}

/// Stationary surrogate loss for channel `i`:
/// `l_t^i(m_i) = cost(t, y(m_i, others), v(m_i))` with every window slot of
/// channel i replaced by `m_i` and the other channels stationary at `others`.
///
/// `env`/`signal` are anchored at t-1 (`w[l] = w_{t-1-l}`, length >= 2H+1).
/// With `with_grad`, fills the exact chain-rule gradient through the affine
/// maps `m_i -> (y, v)`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_loss(
    stack: &TransferStack,
    i: usize,
    m_i: &DacParams,
    others: &[DacParams],
    k_i: &DMatrix<f64>,
    cost: &dyn CostOracle,
    t: usize,
    env: &[DVector<f64>],
    signal: &[DVector<f64>],
    with_grad: bool,
) -> Result<SurrogateEval> {
    if others.len() != stack.channels() {
        return Err(Error::Dimension {
            context: "surrogate_loss others",
            expected: format!("{} channel slots", stack.channels()),
            got: format!("{}", others.len()),
        });
    }
    let y = stack.ideal_state_impl(&|_, c| if c == i { m_i } else { &others[c] }, env, signal)?;
    if cfg!(debug_assertions) {
        let y2 =
            stack.ideal_state_rollout_impl(&|_, c| if c == i { m_i } else { &others[c] }, env, signal)?;
        debug_assert!(
            (&y - &y2).norm() <= 1e-10 * (1.0 + y.norm()),
            "ideal-state routes disagree: {}",
            (&y - &y2).norm()
        );
    }
    let v = ideal_action(k_i, m_i, &y, signal);
    let loss = cost.value(t, &y, &v);
    let grad = if with_grad {
        let g_x = cost.grad_x(t, &y, &v);
        let g_u = cost.grad_u(t, &y, &v);
        let z = &g_x - k_i.transpose() * &g_u;
        Some(grad_blocks(stack, i, &z, &g_u, signal))
    } else {
        None
    };
    Ok(SurrogateEval { y, v, loss, grad })
}

/// Assemble the gradient blocks of a scalar function of `(y, v_i)` with
/// respect to channel i's stationary DAC blocks.
///
/// `z` is the adjoint on the ideal state (`grad_y` plus action backprop,
/// i.e. `g_x - K_i^T g_{u_i}` for a per-agent loss, or
/// `g_x - sum_c K_c^T g_{u_c}` for a joint one) and `g_ui` the direct
/// gradient on channel i's action slice. The result is
/// `grad^[p-1] = sum_{k=0}^{H} (B_i^T (A_cl^T)^k z) signal[k+p]^T
///             + g_ui signal[p-1]^T`.
pub fn grad_blocks(
    stack: &TransferStack,
    i: usize,
    z: &DVector<f64>,
    g_ui: &DVector<f64>,
    signal: &[DVector<f64>],
) -> DacParams {
    let h = stack.h();
    let b_i = stack.channel(i);
    // bz[k] = B_i^T (A_cl^T)^k z, built by iterating the adjoint chain.
    let mut zk = z.clone();
    let mut bz = Vec::with_capacity(h + 1);
    for k in 0..=h {
        bz.push(b_i.transpose() * &zk);
        if k < h {
            zk = stack.a_cl().transpose() * zk;
        }
    }
    let (kdim, d) = (b_i.ncols(), stack.dim());
    let mut blocks = Vec::with_capacity(h);
    for p in 1..=h {
        let mut g = DMatrix::zeros(kdim, d);
        for (k, bzk) in bz.iter().enumerate() {
            g += bzk * signal[k + p].transpose();
        }
        g += g_ui * signal[p - 1].transpose();
        blocks.push(g);
    }
    DacParams::new(blocks).expect("gradient blocks are well-formed")
}

/// Windowed surrogate loss `l_t(M_{.,t-1-H:t})` used by the incurred-loss
/// bookkeeping: the ideal state reads the realized parameter window anchored
/// at t-1 (`window[k+1]`), while channel i's direct action term uses the
/// round-t parameters (`window[0][i]`).
///
/// `window[k][c]` = channel c's blocks k rounds before t, `k = 0..=H+1`.
#[allow(clippy::too_many_arguments)]
pub fn windowed_surrogate_loss(
    stack: &TransferStack,
    i: usize,
    window: &[Vec<DacParams>],
    k_i: &DMatrix<f64>,
    cost: &dyn CostOracle,
    t: usize,
    env: &[DVector<f64>],
    signal: &[DVector<f64>],
) -> Result<f64> {
    if window.len() < stack.h() + 2 {
        return Err(Error::Config(format!(
            "windowed loss needs H+2 = {} parameter slots, got {}",
            stack.h() + 2,
            window.len()
        )));
    }
    let y = stack.ideal_state(&window[1..], env, signal)?;
    let v = ideal_action(k_i, &window[0][i], &y, signal);
    Ok(cost.value(t, &y, &v))
}

/// Certified constants for the transfer-norm, state/action magnitude, and
/// loss-regularity bounds, all derived from a strong-stability pair
/// `(kappa, gamma)`, the DAC decay scale `tau`, the disturbance bound W,
/// the memory length H, and the channel norms.
#[derive(Clone, Copy, Debug)]
pub struct BoundContext {
    pub kappa: f64,
    pub gamma: f64,
    pub tau: f64,
    pub w_bound: f64,
    pub h_mem: usize,
    pub sum_b: f64,
    pub max_b: f64,
    pub state_dim: usize,
}

impl BoundContext {
    pub fn new(
        kappa: f64,
        gamma: f64,
        tau: f64,
        w_bound: f64,
        h_mem: usize,
        sum_b: f64,
        max_b: f64,
        state_dim: usize,
    ) -> Self {
        Self {
            kappa,
            gamma,
            tau,
            w_bound,
            h_mem,
            sum_b,
            max_b,
            state_dim,
        }
    }

    fn decay(&self) -> f64 {
        1.0 - self.gamma
    }

    /// `1 + tau H sum_c ||B_c||`, the recurring drive amplification factor.
    fn drive(&self) -> f64 {
        1.0 + self.tau * self.h_mem as f64 * self.sum_b
    }

    /// `1 / (1 - kappa (1-gamma)^{H+1})`, the geometric unrolling factor.
    fn unroll(&self) -> f64 {
        1.0 / (1.0 - self.kappa * self.decay().powi(self.h_mem as i32 + 1))
    }

    /// Memory long enough for the unrolling factor to be at most 2.
    pub fn burn_in_ok(&self) -> bool {
        (self.h_mem + 1) as f64 >= (2.0 * self.kappa).ln() / self.gamma
    }

    /// Transfer-matrix norm bound at lag l (valid for window spans h <= H):
    /// `kappa (1-gamma)^l 1{l <= H} + H kappa tau (sum ||B||) (1-gamma)^{l-1}`.
    pub fn psi_bound(&self, l: usize) -> f64 {
        let head = if l <= self.h_mem {
            self.kappa * self.decay().powi(l as i32)
        } else {
            0.0
        };
        head + self.h_mem as f64
            * self.kappa
            * self.tau
            * self.sum_b
            * self.decay().powi(l as i32 - 1)
    }

    /// Realized-state bound under feasible DAC play (t >= H+1).
    pub fn state_bound(&self) -> f64 {
        self.kappa / self.gamma * self.w_bound * self.drive() * self.unroll()
    }

    /// Ideal-state bound.
    pub fn ideal_state_bound(&self) -> f64 {
        self.kappa / self.gamma * self.w_bound * self.drive()
    }

    /// State bound under the pure linear controller (all M = 0).
    pub fn linear_state_bound(&self) -> f64 {
        self.kappa / self.gamma * self.w_bound
    }

    /// Realized-action bound (t >= H+1).
    pub fn action_bound(&self) -> f64 {
        self.kappa * self.kappa / self.gamma * self.w_bound * self.drive() * self.unroll()
            + self.tau / self.gamma * self.w_bound
    }

    /// Ideal-action bound.
    pub fn ideal_action_bound(&self) -> f64 {
        self.kappa * self.kappa / self.gamma * self.w_bound * self.drive()
            + self.tau / self.gamma * self.w_bound
    }

    /// `||x_t - y_t||` bound (t >= H+1).
    pub fn state_deviation_bound(&self) -> f64 {
        self.decay().powi(self.h_mem as i32) * self.kappa * self.kappa / self.gamma
            * self.w_bound
            * self.drive()
            * self.unroll()
    }

    /// `||u_t - v_t||` bound (t >= H+1).
    pub fn action_deviation_bound(&self) -> f64 {
        self.decay().powi(self.h_mem as i32) * self.kappa.powi(3) / self.gamma
            * self.w_bound
            * self.drive()
            * self.unroll()
    }

    /// The uniform magnitude constant
    /// `D = (6 kappa^3 / gamma) W (1 + kappa^2 H sum ||B||)` that
    /// simultaneously dominates states, actions, and their ideal versions
    /// once `burn_in_ok` holds.
    pub fn uniform_d(&self) -> f64 {
        6.0 * self.kappa.powi(3) / self.gamma
            * self.w_bound
            * (1.0 + self.kappa * self.kappa * self.h_mem as f64 * self.sum_b)
    }

    /// Per-round gap between realized and surrogate loss,
    /// `2 G D^2 (1-gamma)^H`, given the cost's gradient-growth constant G
    /// evaluated at D.
    pub fn per_round_deviation_bound(&self, g: f64) -> f64 {
        let d = self.uniform_d();
        2.0 * g * d * d * self.decay().powi(self.h_mem as i32)
    }

    /// Coordinate-wise loss Lipschitz constant `L = 2 G D W kappa^2 max ||B||`.
    pub fn coordinate_lipschitz(&self, g: f64) -> f64 {
        2.0 * g * self.uniform_d() * self.w_bound * self.kappa * self.kappa * self.max_b
    }

    /// Frobenius gradient bound
    /// `G D sqrt(H) d W (1 + 2 kappa^2 max ||B|| / gamma)`.
    pub fn grad_frobenius_bound(&self, g: f64) -> f64 {
        g * self.uniform_d()
            * (self.h_mem as f64).sqrt()
            * self.state_dim as f64
            * self.w_bound
            * (1.0 + 2.0 * self.kappa * self.kappa * self.max_b / self.gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::QuadraticTracking;
    use crate::dac_policy::DacSet;
    use crate::linalg::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Linear cost for constant-gradient checks.
    struct LinearCost {
        gx: DVector<f64>,
        gu: DVector<f64>,
    }

    impl CostOracle for LinearCost {
        fn dim_x(&self) -> usize {
            self.gx.len()
        }
        fn dim_u(&self) -> usize {
            self.gu.len()
        }
        fn value(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            self.gx.dot(x) + self.gu.dot(u)
        }
        fn grad_x(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            self.gx.clone()
        }
        fn grad_u(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            self.gu.clone()
        }
        fn quad_growth(&self, d: f64) -> f64 {
            (self.gx.norm() + self.gu.norm()) / d
        }
        fn grad_growth(&self, d: f64) -> f64 {
            self.gx.norm().max(self.gu.norm()) / d
        }
    }

    struct RandomInstance {
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        k: Vec<DMatrix<f64>>,
        stack: TransferStack,
        set: DacSet,
        ms: Vec<DacParams>,
    }

    /// Random multi-channel instance with a contractive closed loop and
    /// feasible stationary parameters.
    fn random_instance(rng: &mut impl Rng, d: usize, n: usize, h: usize) -> RandomInstance {
        let mut a_cl = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let norm = spectral_norm(&a_cl);
        let rho_target = rng.gen_range(0.2..0.7);
        a_cl *= rho_target / norm.max(1e-9);
        // Build (A, B, K) consistent with this closed loop.
        let b: Vec<DMatrix<f64>> = (0..n)
            .map(|_| DMatrix::from_fn(d, rng.gen_range(1..=2), |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let k: Vec<DMatrix<f64>> = b
            .iter()
            .map(|bi| DMatrix::from_fn(bi.ncols(), d, |_, _| rng.gen_range(-0.3..0.3)))
            .collect();
        let mut a = a_cl.clone();
        for (bi, ki) in b.iter().zip(&k) {
            a += bi * ki;
        }
        let kappa = 2.0_f64;
        let gamma = 1.0 - rho_target;
        let stack = TransferStack::new(a_cl, b.clone(), h).unwrap();
        let ms: Vec<DacParams> = b
            .iter()
            .map(|bi| {
                DacSet::with_tau(2.0 * kappa * kappa, kappa, gamma, h, bi.ncols(), d)
                    .unwrap()
                    .sample(rng)
            })
            .collect();
        let set = DacSet::with_tau(2.0 * kappa * kappa, kappa, gamma, h, b[0].ncols(), d).unwrap();
        RandomInstance {
            a,
            b,
            k,
            stack,
            set,
            ms,
        }
    }

    fn rand_window(rng: &mut impl Rng, inst: &RandomInstance, slots: usize) -> Vec<Vec<DacParams>> {
        (0..slots)
            .map(|_| {
                inst.b
                    .iter()
                    .map(|bi| {
                        DacSet::with_tau(
                            2.0 * 4.0,
                            2.0,
                            1.0 - spectral_norm(inst.stack.a_cl()),
                            inst.stack.h(),
                            bi.ncols(),
                            inst.stack.dim(),
                        )
                        .unwrap()
                        .sample(rng)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn cached_powers_match_repeated_products() {
        let mut rng = stream_rng(21, &[0]);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5));
        let stack = TransferStack::new(a.clone(), vec![DMatrix::identity(3, 3)], 4).unwrap();
        let mut prod = DMatrix::identity(3, 3);
        for l in 0..=9 {
            assert!((stack.power(l) - &prod).norm() < 1e-10, "power {l}");
            prod = &a * prod;
        }
    }

    #[test]
    fn psi_with_zero_params_is_closed_loop_power() {
        let mut rng = stream_rng(22, &[0]);
        let inst = random_instance(&mut rng, 2, 2, 3);
        let zeros: Vec<DacParams> = inst
            .b
            .iter()
            .map(|bi| DacParams::zeros(3, bi.ncols(), 2))
            .collect();
        for h in 0..=3usize {
            for l in 0..=h {
                let psi = inst.stack.psi_stationary(&zeros, l, h).unwrap();
                assert_eq!(psi, *inst.stack.power(l), "l={l}, h={h}");
            }
            // beyond h with zero params: zero matrix
            for l in (h + 1)..=(3 + h) {
                let psi = inst.stack.psi_stationary(&zeros, l, h).unwrap();
                assert_eq!(psi, DMatrix::zeros(2, 2));
            }
        }
    }

    #[test]
    fn psi_at_max_lag_keeps_only_last_summand() {
        // Scalar instance: l = H + h leaves only k = h, p-1 = H-1.
        let h_mem = 3usize;
        let a_cl = DMatrix::from_element(1, 1, 0.5);
        let b = vec![
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, -1.0),
        ];
        let stack = TransferStack::new(a_cl, b, h_mem).unwrap();
        let mut window = Vec::new();
        for k in 0..=h_mem {
            // distinct per-slot parameters to catch index mix-ups
            let mk = |base: f64| {
                DacParams::new(
                    (0..h_mem)
                        .map(|p| DMatrix::from_element(1, 1, base + 0.1 * p as f64 + k as f64))
                        .collect(),
                )
                .unwrap()
            };
            window.push(vec![mk(0.3), mk(-0.5)]);
        }
        for h in 1..=h_mem {
            let l = h_mem + h;
            let psi = stack.psi(&window, l, h).unwrap();
            // A_cl^h * (B_1 M_{1,t-h}^[H-1] + B_2 M_{2,t-h}^[H-1])
            let m1 = window[h][0].block(h_mem - 1)[(0, 0)];
            let m2 = window[h][1].block(h_mem - 1)[(0, 0)];
            let expect = 0.5f64.powi(h as i32) * (2.0 * m1 - m2);
            assert_relative_eq!(psi[(0, 0)], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn psi_norm_respects_transfer_bound() {
        let mut rng = stream_rng(23, &[1]);
        for trial in 0..100 {
            let d = rng.gen_range(1..=2);
            let n = rng.gen_range(1..=2);
            let h_mem = rng.gen_range(1..=4);
            let inst = random_instance(&mut rng, d, n, h_mem);
            let gamma = 1.0 - spectral_norm(inst.stack.a_cl());
            let ctx = BoundContext::new(
                2.0,
                gamma,
                2.0 * 4.0,
                1.0,
                h_mem,
                inst.stack.sum_channel_norms(),
                inst.stack.max_channel_norm(),
                d,
            );
            let h = rng.gen_range(0..=h_mem);
            let window = rand_window(&mut rng, &inst, h + 1);
            for l in 0..=(h_mem + h) {
                let psi = inst.stack.psi(&window, l, h).unwrap();
                let bound = ctx.psi_bound(l);
                assert!(
                    spectral_norm(&psi) <= bound + 1e-9,
                    "trial {trial}: l={l}, h={h}: {} > {bound}",
                    spectral_norm(&psi)
                );
            }
        }
    }

    #[test]
    fn unroll_state_matches_direct_simulation() {
        let mut rng = stream_rng(24, &[2]);
        for trial in 0..100 {
            let d = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=3);
            let h_mem = rng.gen_range(1..=5);
            let inst = random_instance(&mut rng, d, n, h_mem);
            let rounds = 30usize;
            // Per-round parameter history (time-varying, feasible).
            let hist: Vec<Vec<DacParams>> = (0..rounds)
                .map(|_| rand_window(&mut rng, &inst, 1).remove(0))
                .collect();
            let ws: Vec<DVector<f64>> = (0..rounds)
                .map(|_| {
                    let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                    let norm = v.norm();
                    if norm > 1.0 {
                        v / norm
                    } else {
                        v
                    }
                })
                .collect();
            // Direct simulation with DAC on the true disturbance.
            let mut xs = vec![DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5))];
            for t in 0..rounds {
                let x = xs[t].clone();
                let mut next = &inst.a * &x + &ws[t];
                for (c, (bc, kc)) in inst.b.iter().zip(&inst.k).enumerate() {
                    let mut u = -(kc * &x);
                    for p in 1..=h_mem {
                        if t >= p {
                            u += hist[t][c].block(p - 1) * &ws[t - p];
                        }
                    }
                    next += bc * u;
                }
                xs.push(next);
            }
            // Reconstruct x_{t+1} through the transfer route.
            let t = rounds - 1;
            let h = rng.gen_range(0..=h_mem.min(t - h_mem));
            let window: Vec<Vec<DacParams>> = (0..=h).map(|k| hist[t - k].clone()).collect();
            let w_win: Vec<DVector<f64>> = (0..=(h_mem + h))
                .map(|l| {
                    if t >= l {
                        ws[t - l].clone()
                    } else {
                        DVector::zeros(d)
                    }
                })
                .collect();
            let got = inst
                .stack
                .unroll_state(&window, h, &xs[t - h], &w_win)
                .unwrap();
            let want = &xs[t + 1];
            assert!(
                (&got - want).norm() <= 1e-8 * (1.0 + want.norm()),
                "trial {trial}: {} vs {}",
                got,
                want
            );
        }
    }

    #[test]
    fn ideal_state_zero_disturbances_is_zero() {
        let mut rng = stream_rng(25, &[3]);
        let inst = random_instance(&mut rng, 3, 2, 3);
        let zeros = vec![DVector::zeros(3); 7];
        let y = inst
            .stack
            .ideal_state_stationary(&inst.ms, &zeros, &zeros)
            .unwrap();
        assert_eq!(y, DVector::zeros(3));
    }

    #[test]
    fn ideal_state_routes_agree() {
        let mut rng = stream_rng(26, &[4]);
        for trial in 0..100 {
            let d = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=3);
            let h_mem = rng.gen_range(1..=5);
            let inst = random_instance(&mut rng, d, n, h_mem);
            let len = 2 * h_mem + 1;
            let env: Vec<DVector<f64>> = (0..len)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let signal: Vec<DVector<f64>> = (0..len)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let (y, gap) = inst.stack.ideal_state_checked(&inst.ms, &env, &signal).unwrap();
            assert!(gap <= 1e-10 * (1.0 + y.norm()), "trial {trial}: gap {gap}");
            // Time-varying windows agree across routes too.
            let window = rand_window(&mut rng, &inst, h_mem + 1);
            let y1 = inst.stack.ideal_state(&window, &env, &signal).unwrap();
            let y2 = inst.stack.ideal_state_rollout(&window, &env, &signal).unwrap();
            assert!((&y1 - &y2).norm() <= 1e-10 * (1.0 + y1.norm()));
        }
    }

    #[test]
    fn ideal_state_norm_respects_bound() {
        let mut rng = stream_rng(27, &[5]);
        for _ in 0..50 {
            let d = rng.gen_range(1..=3);
            let n = rng.gen_range(1..=2);
            let h_mem = rng.gen_range(1..=4);
            let inst = random_instance(&mut rng, d, n, h_mem);
            let gamma = 1.0 - spectral_norm(inst.stack.a_cl());
            let ctx = BoundContext::new(
                2.0,
                gamma,
                8.0,
                1.0,
                h_mem,
                inst.stack.sum_channel_norms(),
                inst.stack.max_channel_norm(),
                d,
            );
            let len = 2 * h_mem + 1;
            let w: Vec<DVector<f64>> = (0..len)
                .map(|_| {
                    let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                    let n: f64 = v.norm();
                    v / n.max(1.0)
                })
                .collect();
            let y = inst.stack.ideal_state_stationary(&inst.ms, &w, &w).unwrap();
            assert!(y.norm() <= ctx.ideal_state_bound() + 1e-9);
        }
    }

    #[test]
    fn surrogate_zero_params_zero_disturbance_hits_origin_cost() {
        let mut rng = stream_rng(28, &[6]);
        let inst = random_instance(&mut rng, 2, 2, 2);
        let cost = QuadraticTracking::constant_targets(
            DVector::from_column_slice(&[0.7, -0.2]),
            DVector::zeros(inst.b[0].ncols()),
            1.0,
        )
        .unwrap();
        let zeros_m: Vec<DacParams> = inst
            .b
            .iter()
            .map(|bi| DacParams::zeros(2, bi.ncols(), 2))
            .collect();
        let wz = vec![DVector::zeros(2); 5];
        let eval = surrogate_loss(
            &inst.stack,
            0,
            &zeros_m[0],
            &zeros_m,
            &inst.k[0],
            &cost,
            0,
            &wz,
            &wz,
            false,
        )
        .unwrap();
        assert_eq!(eval.y, DVector::zeros(2));
        assert_eq!(eval.v, DVector::zeros(inst.b[0].ncols()));
        assert_relative_eq!(
            eval.loss,
            cost.value(0, &DVector::zeros(2), &DVector::zeros(inst.b[0].ncols())),
            epsilon = 1e-15
        );
    }

    #[test]
    fn surrogate_is_convex_in_own_params() {
        let mut rng = stream_rng(29, &[7]);
        let inst = random_instance(&mut rng, 2, 2, 3);
        let cost = QuadraticTracking::constant_targets(
            DVector::from_column_slice(&[0.3, 0.1]),
            DVector::zeros(inst.b[1].ncols()),
            0.7,
        )
        .unwrap();
        let len = 7;
        let env: Vec<DVector<f64>> = (0..len)
            .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let signal = env.clone();
        let own_set = DacSet::with_tau(8.0, 2.0, 0.3, 3, inst.b[1].ncols(), 2).unwrap();
        for _ in 0..1000 {
            let m1 = own_set.sample(&mut rng);
            let m2 = own_set.sample(&mut rng);
            let mid = m1.add_scaled(&m2, 1.0).add_scaled(&m1.add_scaled(&m2, 1.0), -0.5);
            let eval = |m: &DacParams| {
                surrogate_loss(
                    &inst.stack, 1, m, &inst.ms, &inst.k[1], &cost, 0, &env, &signal, false,
                )
                .unwrap()
                .loss
            };
            assert!(eval(&mid) <= (eval(&m1) + eval(&m2)) / 2.0 + 1e-9);
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut rng = stream_rng(30, &[8]);
        for trial in 0..100 {
            let d = rng.gen_range(1..=3);
            let n = rng.gen_range(1..=3);
            let h_mem = rng.gen_range(1..=4);
            let inst = random_instance(&mut rng, d, n, h_mem);
            let i = rng.gen_range(0..n);
            let ki_dim = inst.b[i].ncols();
            let cost = QuadraticTracking::constant_targets(
                DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5)),
                DVector::from_fn(ki_dim, |_, _| rng.gen_range(-0.5..0.5)),
                rng.gen_range(0.0..2.0),
            )
            .unwrap();
            let len = 2 * h_mem + 1;
            let env: Vec<DVector<f64>> = (0..len)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let signal: Vec<DVector<f64>> = (0..len)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let m_i = DacSet::with_tau(8.0, 2.0, 0.3, h_mem, ki_dim, d)
                .unwrap()
                .sample(&mut rng);
            let eval = surrogate_loss(
                &inst.stack, i, &m_i, &inst.ms, &inst.k[i], &cost, 0, &env, &signal, true,
            )
            .unwrap();
            let grad = eval.grad.unwrap();
            let fd_eps = 1e-5;
            for p in 0..h_mem {
                for r in 0..ki_dim {
                    for c in 0..d {
                        let mut mp = m_i.clone();
                        mp.blocks_mut()[p][(r, c)] += fd_eps;
                        let mut mm = m_i.clone();
                        mm.blocks_mut()[p][(r, c)] -= fd_eps;
                        let lp = surrogate_loss(
                            &inst.stack, i, &mp, &inst.ms, &inst.k[i], &cost, 0, &env, &signal,
                            false,
                        )
                        .unwrap()
                        .loss;
                        let lm = surrogate_loss(
                            &inst.stack, i, &mm, &inst.ms, &inst.k[i], &cost, 0, &env, &signal,
                            false,
                        )
                        .unwrap()
                        .loss;
                        let fd = (lp - lm) / (2.0 * fd_eps);
                        let an = grad.block(p)[(r, c)];
                        let scale = 1.0f64.max(an.abs());
                        assert!(
                            (an - fd).abs() / scale <= 1e-5,
                            "trial {trial}: block {p} ({r},{c}): analytic {an} vs fd {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn linear_cost_gradient_is_constant_in_params() {
        let mut rng = stream_rng(31, &[9]);
        let inst = random_instance(&mut rng, 2, 2, 3);
        let ki_dim = inst.b[0].ncols();
        let cost = LinearCost {
            gx: DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
            gu: DVector::from_fn(ki_dim, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let len = 7;
        let env: Vec<DVector<f64>> = (0..len)
            .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let g_at = |m: &DacParams| {
            surrogate_loss(&inst.stack, 0, m, &inst.ms, &inst.k[0], &cost, 0, &env, &env, true)
                .unwrap()
                .grad
                .unwrap()
        };
        let g1 = g_at(&inst.set.sample(&mut rng));
        let g2 = g_at(&inst.set.sample(&mut rng));
        assert!(g1.frobenius_distance(&g2) <= 1e-12);
    }

    #[test]
    fn gradient_norm_respects_frobenius_bound() {
        let mut rng = stream_rng(32, &[10]);
        for _ in 0..50 {
            let d = rng.gen_range(1..=3);
            let n = rng.gen_range(1..=2);
            let h_mem = rng.gen_range(1..=4);
            let inst = random_instance(&mut rng, d, n, h_mem);
            let gamma = 1.0 - spectral_norm(inst.stack.a_cl());
            let ctx = BoundContext::new(
                2.0,
                gamma,
                8.0,
                1.0,
                h_mem,
                inst.stack.sum_channel_norms(),
                inst.stack.max_channel_norm(),
                d,
            );
            let i = rng.gen_range(0..n);
            let ki_dim = inst.b[i].ncols();
            let cost = QuadraticTracking::constant_targets(
                DVector::zeros(d),
                DVector::zeros(ki_dim),
                1.0,
            )
            .unwrap();
            let len = 2 * h_mem + 1;
            let w: Vec<DVector<f64>> = (0..len)
                .map(|_| {
                    let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                    let nn: f64 = v.norm();
                    v / nn.max(1.0)
                })
                .collect();
            let m_i = DacSet::with_tau(8.0, 2.0, gamma, h_mem, ki_dim, d)
                .unwrap()
                .sample(&mut rng);
            let eval = surrogate_loss(
                &inst.stack, i, &m_i, &inst.ms, &inst.k[i], &cost, 0, &w, &w, true,
            )
            .unwrap();
            let g = cost.grad_growth(ctx.uniform_d());
            let bound = ctx.grad_frobenius_bound(g);
            assert!(
                eval.grad.unwrap().frobenius_norm() <= bound + 1e-9,
                "gradient bound violated"
            );
        }
    }

    #[test]
    fn coordinate_perturbations_respect_lipschitz_bound() {
        let mut rng = stream_rng(33, &[11]);
        for _ in 0..30 {
            let d = rng.gen_range(1..=2);
            let n = rng.gen_range(1..=2);
            let h_mem = rng.gen_range(1..=3);
            let inst = random_instance(&mut rng, d, n, h_mem);
            // Keep max channel norm at >= 1 so the constant applies cleanly.
            let gamma = 1.0 - spectral_norm(inst.stack.a_cl());
            let ctx = BoundContext::new(
                2.0,
                gamma,
                8.0,
                1.0,
                h_mem,
                inst.stack.sum_channel_norms(),
                inst.stack.max_channel_norm().max(1.0),
                d,
            );
            let i = rng.gen_range(0..n);
            let ki_dim = inst.b[i].ncols();
            let cost = QuadraticTracking::constant_targets(
                DVector::zeros(d),
                DVector::zeros(ki_dim),
                1.0,
            )
            .unwrap();
            let g = cost.grad_growth(ctx.uniform_d());
            let lip = ctx.coordinate_lipschitz(g);
            let len = 2 * h_mem + 1;
            let w: Vec<DVector<f64>> = (0..len)
                .map(|_| {
                    let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                    let nn: f64 = v.norm();
                    v / nn.max(1.0)
                })
                .collect();
            let window = rand_window(&mut rng, &inst, h_mem + 2);
            let slot = rng.gen_range(0..=h_mem + 1);
            let mut perturbed = window.clone();
            perturbed[slot][i] = DacSet::with_tau(8.0, 2.0, gamma, h_mem, ki_dim, d)
                .unwrap()
                .sample(&mut rng);
            let l0 = windowed_surrogate_loss(
                &inst.stack, i, &window, &inst.k[i], &cost, 0, &w, &w,
            )
            .unwrap();
            let l1 = windowed_surrogate_loss(
                &inst.stack, i, &perturbed, &inst.k[i], &cost, 0, &w, &w,
            )
            .unwrap();
            let diff_sum: f64 = window[slot][i]
                .blocks()
                .iter()
                .zip(perturbed[slot][i].blocks())
                .map(|(a, b)| spectral_norm(&(a - b)))
                .sum();
            assert!(
                (l1 - l0).abs() <= lip * diff_sum + 1e-9,
                "coordinate Lipschitz bound violated: {} > {}",
                (l1 - l0).abs(),
                lip * diff_sum
            );
        }
    }

    #[test]
    fn uniform_d_matches_worked_example() {
        let ctx = BoundContext::new(1.0, 0.5, 2.0, 1.0, 2, 2.0, 1.0, 1);
        assert_relative_eq!(ctx.uniform_d(), 60.0, epsilon = 1e-12);
    }
}
