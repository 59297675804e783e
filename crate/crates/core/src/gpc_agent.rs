//! Per-agent online gradient perturbation controller, theorem-driven
//! hyperparameter tuning, and a generic projected-OGD-with-memory engine.
//!
//! Each agent plays `u_t = -K_i x_t + sum_p M^[p-1] s_{t-p}` where `s` is the
//! setting-appropriate signal (its own residual disturbance under own-residual
//! information, the true disturbance when disturbances are shared), then takes
//! one projected gradient step on its stationary surrogate loss after every
//! round. The agent sees only its own channel: the constructor copies `A`,
//! `B_i`, `K_i` and nothing else, so an own-residual agent has no way to read
//! other agents' controls or the true disturbance.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::costs::CostOracle;
use crate::counterfactual::{surrogate_loss, TransferStack};
use crate::dac_policy::{BallNorm, DacParams, DacSet, DisturbanceBuffer};
use crate::error::{Error, Result};
use crate::lds_core::{Agent, InfoSetting, LdsSystem, Observation};

/// Everything needed to instantiate one learning agent.
#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub index: usize,
    /// Stabilizing feedback for this agent's channel.
    pub k: DMatrix<f64>,
    /// Strong-stability pair certified for the relevant closed loop.
    pub kappa: f64,
    pub gamma: f64,
    pub h: usize,
    pub eta: f64,
    pub setting: InfoSetting,
    pub norm: BallNorm,
    /// Initial DAC blocks; all zeros when absent.
    pub m_init: Option<DacParams>,
}

impl AgentConfig {
    pub fn new(index: usize, k: DMatrix<f64>, kappa: f64, gamma: f64, h: usize, eta: f64) -> Self {
        Self {
            index,
            k,
            kappa,
            gamma,
            h,
            eta,
            setting: InfoSetting::OwnResidual,
            norm: BallNorm::Spectral,
            m_init: None,
        }
    }

    pub fn with_setting(mut self, setting: InfoSetting) -> Self {
        self.setting = setting;
        self
    }

    pub fn with_norm(mut self, norm: BallNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_m_init(mut self, m: DacParams) -> Self {
        self.m_init = Some(m);
        self
    }
}

/// Online gradient perturbation controller for one agent.
pub struct GpcAgent {
    index: usize,
    setting: InfoSetting,
    a: DMatrix<f64>,
    b_i: DMatrix<f64>,
    k_i: DMatrix<f64>,
    stack: TransferStack,
    set: DacSet,
    cost: Arc<dyn CostOracle>,
    m: DacParams,
    eta: f64,
    /// Signal buffer: drives the DAC action and the surrogate's block terms.
    signal: DisturbanceBuffer,
    /// Environment buffer for the surrogate's autonomous terms; under
    /// own-residual information this aliases the signal (same sequence).
    env: Option<DisturbanceBuffer>,
    rounds_observed: usize,
}

impl GpcAgent {
    pub fn new(cfg: AgentConfig, sys: &LdsSystem, cost: Arc<dyn CostOracle>) -> Result<Self> {
        let d = sys.dim();
        if cfg.index >= sys.n_agents() {
            return Err(Error::Config(format!(
                "agent index {} out of range (N = {})",
                cfg.index,
                sys.n_agents()
            )));
        }
        let b_i = sys.b(cfg.index).clone();
        if cfg.k.nrows() != b_i.ncols() || cfg.k.ncols() != d {
            return Err(Error::Dimension {
                context: "agent feedback gain",
                expected: format!("{}x{}", b_i.ncols(), d),
                got: format!("{}x{}", cfg.k.nrows(), cfg.k.ncols()),
            });
        }
        if cfg.eta < 0.0 || !cfg.eta.is_finite() {
            return Err(Error::Config(format!("step size must be >= 0, got {}", cfg.eta)));
        }
        let a_cl = sys.a() - &b_i * &cfg.k;
        let stack = TransferStack::new(a_cl, vec![b_i.clone()], cfg.h)?;
        let set = DacSet::with_tau(
            2.0 * cfg.kappa * cfg.kappa,
            cfg.kappa,
            cfg.gamma,
            cfg.h,
            b_i.ncols(),
            d,
        )?
        .with_norm(cfg.norm);
        let m = match cfg.m_init {
            Some(m0) => {
                if !set.membership(&m0) {
                    return Err(Error::Config("initial DAC blocks are infeasible".into()));
                }
                m0
            }
            None => set.zero_params(),
        };
        let env = match cfg.setting {
            InfoSetting::OwnResidual => None,
            InfoSetting::SharedDisturbance => Some(DisturbanceBuffer::new(d)),
        };
        Ok(Self {
            index: cfg.index,
            setting: cfg.setting,
            a: sys.a().clone(),
            b_i,
            k_i: cfg.k,
            stack,
            set,
            cost,
            m,
            eta: cfg.eta,
            signal: DisturbanceBuffer::new(d),
            env,
            rounds_observed: 0,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn h(&self) -> usize {
        self.stack.h()
    }

    pub fn set(&self) -> &DacSet {
        &self.set
    }

    pub fn params(&self) -> &DacParams {
        &self.m
    }

    pub fn rounds_observed(&self) -> usize {
        self.rounds_observed
    }

    /// Surrogate loss and gradient at the agent's current parameters for the
    /// given round, using the buffered windows (anchored one round back).
    fn surrogate_at_current(&self, t: usize) -> Result<crate::counterfactual::SurrogateEval> {
        let h = self.stack.h();
        let anchor = t as isize - 1;
        let signal_win = self.signal.window_ending(anchor, 2 * h + 1);
        let env_win = match &self.env {
            Some(buf) => buf.window_ending(anchor, h + 1),
            None => self.signal.window_ending(anchor, h + 1),
        };
        surrogate_loss(
            &self.stack,
            0,
            &self.m,
            std::slice::from_ref(&self.m),
            &self.k_i,
            self.cost.as_ref(),
            t,
            &env_win,
            &signal_win,
            true,
        )
    }
}

impl Agent for GpcAgent {
    fn control_dim(&self) -> usize {
        self.b_i.ncols()
    }

    fn setting(&self) -> InfoSetting {
        self.setting
    }

    fn act(&mut self, _t: usize, x: &DVector<f64>) -> DVector<f64> {
        crate::dac_policy::control(&self.k_i, &self.m, &self.signal, x)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<DVector<f64>> {
        // Own-channel residual: everything the dynamics did beyond A x + B_i u_i.
        let residual = obs.x_next - &self.a * obs.x - &self.b_i * obs.u_own;
        let w_est = match self.setting {
            InfoSetting::OwnResidual => {
                self.signal.push(residual.clone());
                residual
            }
            InfoSetting::SharedDisturbance => {
                let aggregate = obs.aggregate_other.ok_or(Error::Config(
                    "shared-disturbance agent needs the aggregate control effect".into(),
                ))?;
                let w_true = &residual - aggregate;
                self.signal.push(w_true.clone());
                self.env
                    .as_mut()
                    .expect("shared-disturbance agents keep an env buffer")
                    .push(residual);
                w_true
            }
        };
        if self.eta > 0.0 {
            let eval = self.surrogate_at_current(obs.t)?;
            let grad = eval.grad.expect("gradient requested");
            let stepped = self.m.add_scaled(&grad, -self.eta);
            self.m = self.set.project(&stepped)?;
        }
        self.rounds_observed += 1;
        Ok(w_est)
    }

    fn dac_params(&self) -> Option<&DacParams> {
        Some(&self.m)
    }
}

/// Step size and memory from the own-residual regret guarantee:
/// `W~ = W + (N-1) U max_j ||B_j||`, `eta = c / (G W~ sqrt(T))`,
/// `H = ceil(ln(kappa_i T) / gamma_i)`.
#[derive(Clone, Copy, Debug)]
pub struct TuneSetting1 {
    pub g: f64,
    pub w: f64,
    pub n: usize,
    /// Assumed bound on any other agent's control norm.
    pub u: f64,
    pub max_b: f64,
    pub kappa_i: f64,
    pub gamma_i: f64,
    pub t: usize,
    pub c_eta: f64,
}

pub fn tune_setting1(c: &TuneSetting1) -> Result<(usize, f64)> {
    if c.g <= 0.0 || c.w <= 0.0 || c.n == 0 || c.kappa_i < 1.0 || c.gamma_i <= 0.0 || c.t == 0 {
        return Err(Error::Config("tuning constants must be positive".into()));
    }
    let w_eff = c.w + (c.n as f64 - 1.0) * c.u * c.max_b;
    let eta = c.c_eta / (c.g * w_eff * (c.t as f64).sqrt());
    let h = ((c.kappa_i * c.t as f64).ln() / c.gamma_i).ceil().max(1.0) as usize;
    Ok((h, eta))
}

/// Shared-disturbance tuning: `eta = c / (N sqrt(T))`,
/// `H = ceil(ln(2 kappa N^2 sqrt(T)) / gamma)`.
#[derive(Clone, Copy, Debug)]
pub struct TuneSetting2 {
    pub n: usize,
    pub kappa_bar: f64,
    pub gamma_bar: f64,
    pub t: usize,
    pub c_eta: f64,
}

pub fn tune_setting2(c: &TuneSetting2) -> Result<(usize, f64)> {
    if c.n == 0 || c.kappa_bar < 1.0 || c.gamma_bar <= 0.0 || c.t == 0 {
        return Err(Error::Config("tuning constants must be positive".into()));
    }
    let n = c.n as f64;
    let sqrt_t = (c.t as f64).sqrt();
    let eta = c.c_eta / (n * sqrt_t);
    let h = ((2.0 * c.kappa_bar * n * n * sqrt_t).ln() / c.gamma_bar)
        .ceil()
        .max(1.0) as usize;
    Ok((h, eta))
}

/// Shared-disturbance tuning under a Lipschitz (rather than gradient-bound)
/// cost assumption: `eta = c / sqrt(T)`, `H = ceil(ln(2 kappa N sqrt(T)) / gamma)`.
pub fn tune_setting2_lipschitz(c: &TuneSetting2) -> Result<(usize, f64)> {
    if c.n == 0 || c.kappa_bar < 1.0 || c.gamma_bar <= 0.0 || c.t == 0 {
        return Err(Error::Config("tuning constants must be positive".into()));
    }
    let n = c.n as f64;
    let sqrt_t = (c.t as f64).sqrt();
    let eta = c.c_eta / sqrt_t;
    let h = ((2.0 * c.kappa_bar * n * sqrt_t).ln() / c.gamma_bar)
        .ceil()
        .max(1.0) as usize;
    Ok((h, eta))
}

/// A loss over a window of H+1 iterates (oldest first) exposing the gradient
/// of its diagonal restriction `x -> value(t, (x, ..., x))`.
pub trait MemoryLoss {
    fn memory(&self) -> usize;
    fn value(&self, t: usize, window: &[DVector<f64>]) -> f64;
    fn diagonal_grad(&self, t: usize, x: &DVector<f64>) -> DVector<f64>;
}

#[derive(Clone, Debug)]
pub struct OgdMemoryReport {
    /// Iterates x_0 ..= x_{T+1}.
    pub iterates: Vec<DVector<f64>>,
    /// `sum_{t=H}^{T} l_t(x_{t-H}, ..., x_t)`.
    pub incurred: f64,
    pub comparator: DVector<f64>,
    /// `sum_{t=H}^{T} l_t(x*, ..., x*)` at the found comparator.
    pub comparator_cost: f64,
    pub regret: f64,
}

/// Projected online gradient descent with memory: iterates
/// `x_{t+1} = P(x_t - eta grad l_t(x_t, ..., x_t))` for `t = H..=T`, with the
/// first H+1 iterates pinned to the initial point. The reported regret uses a
/// stationary comparator found by offline projected gradient descent.
pub fn ogd_with_memory(
    loss: &dyn MemoryLoss,
    t_end: usize,
    eta: f64,
    x_init: &DVector<f64>,
    project: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    comparator_iters: usize,
) -> OgdMemoryReport {
    let h = loss.memory();
    let x0 = project(x_init);
    let mut xs = vec![x0; h + 1];
    let mut incurred = 0.0;
    for t in h..=t_end {
        let window: Vec<DVector<f64>> = xs[(t - h)..=t].to_vec();
        incurred += loss.value(t, &window);
        let g = loss.diagonal_grad(t, &xs[t]);
        let next = project(&(&xs[t] - eta * g));
        xs.push(next);
    }
    let stationary_cost = |x: &DVector<f64>| -> f64 {
        let window = vec![x.clone(); h + 1];
        (h..=t_end).map(|t| loss.value(t, &window)).sum()
    };
    let stationary_grad = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        for t in h..=t_end {
            g += loss.diagonal_grad(t, x);
        }
        g
    };
    let comparator = offline_projected_gd(
        &stationary_cost,
        &stationary_grad,
        project,
        &xs[0],
        comparator_iters,
    );
    let comparator_cost = stationary_cost(&comparator);
    OgdMemoryReport {
        regret: incurred - comparator_cost,
        iterates: xs,
        incurred,
        comparator,
        comparator_cost,
    }
}

/// Offline projected gradient descent with a curvature-probed initial step
/// and halving on non-descent. Returns the best iterate seen.
pub fn offline_projected_gd(
    f: &dyn Fn(&DVector<f64>) -> f64,
    grad: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    project: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x_init: &DVector<f64>,
    iters: usize,
) -> DVector<f64> {
    let mut x = project(x_init);
    let g0 = grad(&x);
    // Probe local curvature along the gradient to size the first step.
    let probe = 1e-3 / (1.0 + g0.norm());
    let g1 = grad(&project(&(&x - probe * &g0)));
    let lip = (&g1 - &g0).norm() / probe;
    let mut step = if lip > 1e-12 { 1.0 / lip } else { 1.0 };
    let mut best = x.clone();
    let mut best_val = f(&x);
    for _ in 0..iters {
        let g = grad(&x);
        if g.norm() <= 1e-14 {
            break;
        }
        let cand = project(&(&x - step * &g));
        let val = f(&cand);
        if val <= best_val + 1e-15 {
            if val < best_val {
                best = cand.clone();
                best_val = val;
            }
            x = cand;
            step *= 1.2;
        } else {
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
    }
    best
}
