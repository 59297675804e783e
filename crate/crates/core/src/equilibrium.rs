//! Common-interest experiments: the joint surrogate potential over stacked
//! actions, per-round best-response gaps and their maximum (the equilibrium
//! gap), full tracking runs with constant stepsize, and the path-length and
//! gap-chain checks that certify the recorded runs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::costs::CostOracle;
use crate::counterfactual::{grad_blocks, ideal_action, BoundContext, TransferStack};
use crate::dac_policy::{DacParams, DacSet};
use crate::error::{Error, Result};
use crate::lds_core::{DisturbanceGenerator, LdsSystem};
use crate::linalg::{fmt_f64, stream_rng, subseed};
use crate::stability::certify_global;

/// Inner best-response solver settings.
#[derive(Clone, Copy, Debug)]
pub struct BrOptions {
    /// Projected-gradient stationarity tolerance.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for BrOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 10_000,
        }
    }
}

/// Shared-loss context for the common-interest game: the closed loop uses
/// every agent's channel, and the cost consumes the stacked joint action
/// `(v^1, ..., v^N)`.
pub struct JointPotential<'a> {
    stack: &'a TransferStack,
    ks: &'a [DMatrix<f64>],
    cost: &'a dyn CostOracle,
    offsets: Vec<usize>,
}

impl<'a> JointPotential<'a> {
    pub fn new(
        stack: &'a TransferStack,
        ks: &'a [DMatrix<f64>],
        cost: &'a dyn CostOracle,
    ) -> Result<Self> {
        if ks.len() != stack.channels() {
            return Err(Error::Config(format!(
                "{} gains for {} channels",
                ks.len(),
                stack.channels()
            )));
        }
        let mut offsets = Vec::with_capacity(ks.len() + 1);
        let mut off = 0;
        for (c, k) in ks.iter().enumerate() {
            if k.ncols() != stack.dim() || k.nrows() != stack.channel(c).ncols() {
                return Err(Error::Dimension {
                    context: "joint potential gain",
                    expected: format!("{} x {}", stack.channel(c).ncols(), stack.dim()),
                    got: format!("{} x {}", k.nrows(), k.ncols()),
                });
            }
            offsets.push(off);
            off += k.nrows();
        }
        offsets.push(off);
        if cost.dim_u() != off || cost.dim_x() != stack.dim() {
            return Err(Error::Dimension {
                context: "joint potential cost",
                expected: format!("dim_x {} / dim_u {off}", stack.dim()),
                got: format!("dim_x {} / dim_u {}", cost.dim_x(), cost.dim_u()),
            });
        }
        Ok(Self {
            stack,
            ks,
            cost,
            offsets,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.ks.len()
    }

    /// Ideal state and the stacked joint surrogate action for one stationary
    /// joint parameter profile.
    fn state_action(
        &self,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let (y, route_gap) = self.stack.ideal_state_checked(params, env, signal)?;
        debug_assert!(
            route_gap <= 1e-10 * (1.0 + y.norm()),
            "ideal-state routes disagree by {route_gap}"
        );
        let mut v = DVector::zeros(*self.offsets.last().unwrap());
        for (c, k) in self.ks.iter().enumerate() {
            let vc = ideal_action(k, &params[c], &y, signal);
            v.rows_mut(self.offsets[c], vc.len()).copy_from(&vc);
        }
        Ok((y, v))
    }

    /// Potential value `l_t(M) = c_t(y(M), (v^1(M), ..., v^N(M)))`.
    pub fn loss(
        &self,
        t: usize,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<f64> {
        let (y, v) = self.state_action(params, env, signal)?;
        Ok(self.cost.value(t, &y, &v))
    }

    /// Potential value and the per-agent block gradients in one pass.
    pub fn loss_and_grads(
        &self,
        t: usize,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
    ) -> Result<(f64, Vec<DacParams>)> {
        let (y, v) = self.state_action(params, env, signal)?;
        let (value, g_x, g_u) = self.cost.eval(t, &y, &v);
        let z = self.pullback(&g_x, &g_u);
        let grads = (0..self.ks.len())
            .map(|i| grad_blocks(self.stack, i, &z, &self.g_u_slice(&g_u, i), signal))
            .collect();
        Ok((value, grads))
    }

    /// Potential value and a single agent's gradient (inner-solver hot path).
    pub fn loss_grad_channel(
        &self,
        t: usize,
        params: &[DacParams],
        env: &[DVector<f64>],
        signal: &[DVector<f64>],
        i: usize,
    ) -> Result<(f64, DacParams)> {
        let (y, v) = self.state_action(params, env, signal)?;
        let (value, g_x, g_u) = self.cost.eval(t, &y, &v);
        let z = self.pullback(&g_x, &g_u);
        Ok((
            value,
            grad_blocks(self.stack, i, &z, &self.g_u_slice(&g_u, i), signal),
        ))
    }

    /// `z = g_x - sum_c K_c^T g_{u_c}`: the loss sensitivity to the ideal
    /// state through every agent's feedback term.
    fn pullback(&self, g_x: &DVector<f64>, g_u: &DVector<f64>) -> DVector<f64> {
        let mut z = g_x.clone();
        for (c, k) in self.ks.iter().enumerate() {
            z -= k.transpose() * self.g_u_slice(g_u, c);
        }
        z
    }

    fn g_u_slice(&self, g_u: &DVector<f64>, c: usize) -> DVector<f64> {
        g_u.rows(self.offsets[c], self.offsets[c + 1] - self.offsets[c])
            .into_owned()
    }
}

fn joint_distance(a: &[DacParams], b: &[DacParams]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.frobenius_distance(y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct BrResult {
    /// `l_t(M_t) - min_{M_i} l_t(M_i, M_{-i,t})`, nonnegative by best-iterate
    /// tracking from the current point.
    pub gap: f64,
    pub argmin: DacParams,
    pub iterations: usize,
    pub converged: bool,
}

/// Best-response gap of agent i at round t: inner projected gradient descent
/// on the convex partial map `M_i -> l_t(M_i, M_{-i,t})`, initialized at the
/// current point so the reported gap is nonnegative by construction.
#[allow(clippy::too_many_arguments)]
pub fn best_response_gap(
    pot: &JointPotential<'_>,
    i: usize,
    params: &[DacParams],
    set_i: &DacSet,
    t: usize,
    env: &[DVector<f64>],
    signal: &[DVector<f64>],
    step0: f64,
    opts: &BrOptions,
) -> Result<BrResult> {
    let mut work = params.to_vec();
    let base = pot.loss(t, &work, env, signal)?;
    let mut value = base;
    let mut best_value = base;
    let mut best_m = work[i].clone();
    let mut step = step0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let (_, grad) = pot.loss_grad_channel(t, &work, env, signal, i)?;
        let cand = set_i.project(&work[i].add_scaled(&grad, -step))?;
        let stationarity = work[i].frobenius_distance(&cand) / step;
        if stationarity <= opts.tol {
            converged = true;
            break;
        }
        work[i] = cand;
        let cand_value = pot.loss(t, &work, env, signal)?;
        if cand_value <= value + 1e-15 {
            value = cand_value;
            if cand_value < best_value {
                best_value = cand_value;
                best_m = work[i].clone();
            }
            step = (step * 1.1).min(step0 * 4.0);
        } else {
            work[i] = best_m.clone();
            value = best_value;
            step *= 0.5;
            if step < step0 * 1e-12 {
                break;
            }
        }
    }
    Ok(BrResult {
        gap: (base - best_value).max(0.0),
        argmin: best_m,
        iterations,
        converged,
    })
}

/// One loss evaluation context: a round index with its disturbance windows
/// anchored at t-1.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub t: usize,
    pub env: Vec<DVector<f64>>,
    pub signal: Vec<DVector<f64>>,
}

/// Empirical smoothness of the joint potential: the largest gradient
/// difference ratio over sampled feasible pairs and contexts, times a 1.5
/// safety factor, floored at 1e-12. Fixed seed makes the sample sequence a
/// prefix chain, so the estimate is monotone in `samples`.
pub fn estimate_smoothness(
    pot: &JointPotential<'_>,
    sets: &[DacSet],
    contexts: &[LossContext],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if contexts.is_empty() || samples == 0 {
        return Err(Error::Config("smoothness estimation needs contexts and samples".into()));
    }
    let mut rng = stream_rng(seed, &[0x5e]);
    let mut max_ratio = 0.0f64;
    for s in 0..samples {
        let ctx = &contexts[s % contexts.len()];
        let a: Vec<DacParams> = sets.iter().map(|set| set.sample(&mut rng)).collect();
        let b: Vec<DacParams> = sets.iter().map(|set| set.sample(&mut rng)).collect();
        let dist = joint_distance(&a, &b);
        if dist < 1e-14 {
            continue;
        }
        let (_, ga) = pot.loss_and_grads(ctx.t, &a, &ctx.env, &ctx.signal)?;
        let (_, gb) = pot.loss_and_grads(ctx.t, &b, &ctx.env, &ctx.signal)?;
        max_ratio = max_ratio.max(joint_distance(&ga, &gb) / dist);
    }
    Ok((max_ratio * 1.5).max(1e-12))
}

/// Tracking-run configuration. `eta = None` tunes the constant stepsize to
/// `1 / L_hat` with the smoothness estimated on the run's own disturbances.
#[derive(Clone, Debug)]
pub struct EqGapConfig {
    pub rounds: usize,
    pub h: usize,
    pub x0: Option<DVector<f64>>,
    pub eta: Option<f64>,
    /// Best-response evaluation stride; None picks 1 for short runs and
    /// ceil(rounds / 2000) beyond that.
    pub stride: Option<usize>,
    pub br: BrOptions,
    pub smoothness_samples: usize,
    pub seed: u64,
}

impl EqGapConfig {
    pub fn new(rounds: usize, h: usize) -> Self {
        Self {
            rounds,
            h,
            x0: None,
            eta: None,
            stride: None,
            br: BrOptions::default(),
            smoothness_samples: 24,
            seed: 0,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride.max(1));
        self
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Everything a tracking run records: per-round gap evaluations, the loss
/// ledger of the gap theorem's right-hand side, parameter path lengths, and
/// the constants the proposition checks need.
#[derive(Clone, Debug)]
pub struct EqGapReport {
    pub rounds: usize,
    pub h: usize,
    pub eta: f64,
    /// Measured smoothness estimate of the joint potential.
    pub smoothness: f64,
    pub stride: usize,
    pub kappa_bar: f64,
    pub gamma_bar: f64,
    /// Uniform state/action magnitude bound used for cost constants.
    pub d_bound: f64,
    /// Cost gradient growth constant at that magnitude.
    pub g_bound: f64,
    /// Largest observed per-agent potential gradient norm.
    pub grad_norm_max: Vec<f64>,
    pub diameters: Vec<f64>,
    /// `sum_i (diam_i / eta + max_t ||grad_i l_t||)^2`.
    pub c_m: f64,
    pub c_inf: f64,
    /// First-round potential minus the uniform cost lower bound.
    pub initial_gap: f64,
    /// Rounds at which best responses were solved.
    pub eval_rounds: Vec<usize>,
    /// `br[j][i]` = agent i's gap at `eval_rounds[j]`.
    pub br: Vec<Vec<f64>>,
    pub eqgap: Vec<f64>,
    /// Running average of squared gaps over evaluated rounds.
    pub avg_eqgap_sq: Vec<f64>,
    /// `l_t(M_t)` per round.
    pub losses: Vec<f64>,
    /// `l_t(M_{t+1})` per round.
    pub losses_next: Vec<f64>,
    /// `c_t(x_t, u_t)` along the physical trajectory.
    pub realized_costs: Vec<f64>,
    /// `sum_i ||M_{i,t+1} - M_{i,t}||^2` per round.
    pub path_length_sq: Vec<f64>,
    /// Cost variation `max_{||x||,||u|| <= D} c_{t+1} - c_t` per round.
    pub delta_cost: Vec<f64>,
    /// `||w_{t+1} - w_t||` per round.
    pub dist_variation: Vec<f64>,
    /// Realized disturbances (rounds + 1 entries; the last feeds only the
    /// variation ledger).
    pub ws: Vec<DVector<f64>>,
    /// Joint parameter history, rounds + 1 entries.
    pub m_hist: Vec<Vec<DacParams>>,
    pub br_converged: bool,
}

impl EqGapReport {
    /// Final running average of squared equilibrium gaps.
    pub fn avg_eqgap_sq_final(&self) -> f64 {
        self.avg_eqgap_sq.last().copied().unwrap_or(0.0)
    }

    /// Average squared gap over evaluated rounds up to and including `round`.
    pub fn avg_eqgap_sq_upto(&self, round: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (j, &t) in self.eval_rounds.iter().enumerate() {
            if t <= round {
                sum += self.eqgap[j] * self.eqgap[j];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,i,br,eqgap,cum_eqgap_sq_avg,delta_cost_cum,dist_variation_cum,path_length_cum\n",
        );
        let mut delta_cum = 0.0;
        let mut dist_cum = 0.0;
        let mut path_cum = 0.0;
        let mut j = 0usize;
        for t in 0..self.rounds {
            delta_cum += self.delta_cost[t];
            dist_cum += self.dist_variation[t];
            path_cum += self.path_length_sq[t];
            if j < self.eval_rounds.len() && self.eval_rounds[j] == t {
                for (i, br) in self.br[j].iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        t,
                        i,
                        fmt_f64(*br),
                        fmt_f64(self.eqgap[j]),
                        fmt_f64(self.avg_eqgap_sq[j]),
                        fmt_f64(delta_cum),
                        fmt_f64(dist_cum),
                        fmt_f64(path_cum),
                    ));
                }
                j += 1;
            }
        }
        out
    }
}

/// Disturbance window `[w_{t-1}, w_{t-2}, ...]` of the given length,
/// zero-padded before the first round.
fn window_at(ws: &[DVector<f64>], dim: usize, t: usize, len: usize) -> Vec<DVector<f64>> {
    (0..len)
        .map(|l| {
            let idx = t as isize - 1 - l as isize;
            if idx >= 0 {
                ws[idx as usize].clone()
            } else {
                DVector::zeros(dim)
            }
        })
        .collect()
}

/// All agents follow the constant-stepsize update on the shared potential;
/// the run records best-response gaps on a (possibly strided) round grid plus
/// every ledger term of the average-gap bound.
pub fn eqgap_run(
    sys: &LdsSystem,
    ks: &[DMatrix<f64>],
    cost: &dyn CostOracle,
    gen: &DisturbanceGenerator,
    cfg: &EqGapConfig,
) -> Result<EqGapReport> {
    let n = sys.n_agents();
    let d = sys.dim();
    if ks.len() != n {
        return Err(Error::Config(format!("{} gains for {n} agents", ks.len())));
    }
    if cfg.rounds == 0 || cfg.h == 0 {
        return Err(Error::Config("tracking run needs rounds >= 1 and H >= 1".into()));
    }
    let c_inf = cost
        .lower_bound()
        .ok_or_else(|| Error::Config("shared cost must provide a uniform lower bound".into()))?;
    let b_list: Vec<DMatrix<f64>> = (0..n).map(|i| sys.b(i).clone()).collect();
    let cert = certify_global(sys.a(), &b_list, ks)?;
    let (kappa_bar, gamma_bar) = (cert.kappa, cert.gamma);
    let tau = 2.0 * kappa_bar * kappa_bar;
    let sets: Vec<DacSet> = (0..n)
        .map(|i| DacSet::with_tau(tau, kappa_bar, gamma_bar, cfg.h, ks[i].nrows(), d))
        .collect::<Result<_>>()?;
    let mut a_bar = sys.a().clone();
    for (c, k) in ks.iter().enumerate() {
        a_bar -= sys.b(c) * k;
    }
    let stack = TransferStack::new(a_bar, b_list, cfg.h)?;
    let pot = JointPotential::new(&stack, ks, cost)?;
    let bounds = BoundContext::new(
        kappa_bar,
        gamma_bar,
        tau,
        sys.w_bound(),
        cfg.h,
        stack.sum_channel_norms(),
        stack.max_channel_norm(),
        d,
    );
    let d_bound = bounds.uniform_d();
    let g_bound = cost.grad_growth(d_bound);

    // The generator is a pure function of the round index, so the realized
    // disturbances can be drawn up front; the trailing extra entry feeds only
    // the variation ledger.
    let ws: Vec<DVector<f64>> = (0..=cfg.rounds).map(|t| gen.generate(t)).collect();

    let env_len = cfg.h + 1;
    let sig_len = 2 * cfg.h + 1;
    let eta = match cfg.eta {
        Some(v) if v > 0.0 => v,
        Some(v) => return Err(Error::Config(format!("stepsize must be positive, got {v}"))),
        None => {
            let picks = 8.min(cfg.rounds);
            let contexts: Vec<LossContext> = (0..picks)
                .map(|j| {
                    let t = if picks == 1 {
                        cfg.rounds - 1
                    } else {
                        (cfg.h + 1 + j * cfg.rounds.saturating_sub(cfg.h + 2) / (picks - 1))
                            .min(cfg.rounds - 1)
                    };
                    LossContext {
                        t,
                        env: window_at(&ws, d, t, env_len),
                        signal: window_at(&ws, d, t, sig_len),
                    }
                })
                .collect();
            let l_hat = estimate_smoothness(
                &pot,
                &sets,
                &contexts,
                cfg.smoothness_samples,
                subseed(cfg.seed, &[0x5e]),
            )?;
            1.0 / l_hat
        }
    };
    // Re-estimate for the report even when eta was pinned by the caller.
    let smoothness = {
        let t = cfg.rounds - 1;
        let ctx = LossContext {
            t,
            env: window_at(&ws, d, t, env_len),
            signal: window_at(&ws, d, t, sig_len),
        };
        estimate_smoothness(&pot, &sets, &[ctx], cfg.smoothness_samples, subseed(cfg.seed, &[0x5e]))?
    };
    let stride = cfg
        .stride
        .unwrap_or_else(|| if cfg.rounds <= 2000 { 1 } else { cfg.rounds.div_ceil(2000) });

    let mut x = cfg.x0.clone().unwrap_or_else(|| DVector::zeros(d));
    if x.len() != d {
        return Err(Error::Dimension {
            context: "tracking run x0",
            expected: format!("{d}"),
            got: format!("{}", x.len()),
        });
    }
    let mut m: Vec<DacParams> = sets.iter().map(|s| s.zero_params()).collect();
    let mut m_hist = vec![m.clone()];
    let mut losses = Vec::with_capacity(cfg.rounds);
    let mut losses_next = Vec::with_capacity(cfg.rounds);
    let mut realized_costs = Vec::with_capacity(cfg.rounds);
    let mut path_length_sq = Vec::with_capacity(cfg.rounds);
    let mut delta_cost = Vec::with_capacity(cfg.rounds);
    let mut dist_variation = Vec::with_capacity(cfg.rounds);
    let mut grad_norm_max = vec![0.0f64; n];
    let mut eval_rounds = Vec::new();
    let mut br_rows: Vec<Vec<f64>> = Vec::new();
    let mut eqgap = Vec::new();
    let mut avg_eqgap_sq = Vec::new();
    let mut eqgap_sq_sum = 0.0;
    let mut br_converged = true;

    for t in 0..cfg.rounds {
        let env = window_at(&ws, d, t, env_len);
        let signal = window_at(&ws, d, t, sig_len);
        // Physical controls u_i = -K_i x + sum_p M_i^[p-1] w_{t-p}.
        let mut u = DVector::zeros(cost.dim_u());
        let mut off = 0;
        let mut drive = DVector::zeros(d);
        for (i, k) in ks.iter().enumerate() {
            let mut ui = -(k * &x);
            for p in 1..=cfg.h {
                if t >= p {
                    ui += m[i].block(p - 1) * &ws[t - p];
                }
            }
            drive += sys.b(i) * &ui;
            u.rows_mut(off, ui.len()).copy_from(&ui);
            off += ui.len();
        }
        realized_costs.push(cost.value(t, &x, &u));

        let (loss_t, grads) = pot.loss_and_grads(t, &m, &env, &signal)?;
        losses.push(loss_t);
        for (i, g) in grads.iter().enumerate() {
            grad_norm_max[i] = grad_norm_max[i].max(g.frobenius_norm());
        }

        if t % stride == 0 {
            let results: Vec<BrResult> = (0..n)
                .into_par_iter()
                .map(|i| {
                    best_response_gap(
                        &pot,
                        i,
                        &m,
                        &sets[i],
                        t,
                        &env,
                        &signal,
                        1.0 / smoothness.max(1e-12),
                        &cfg.br,
                    )
                })
                .collect::<Result<_>>()?;
            let row: Vec<f64> = results.iter().map(|r| r.gap).collect();
            let gap = row.iter().cloned().fold(0.0f64, f64::max);
            br_converged &= results.iter().all(|r| r.converged);
            eqgap_sq_sum += gap * gap;
            eval_rounds.push(t);
            eqgap.push(gap);
            avg_eqgap_sq.push(eqgap_sq_sum / eval_rounds.len() as f64);
            br_rows.push(row);
        }

        let m_next: Vec<DacParams> = m
            .iter()
            .zip(&sets)
            .zip(&grads)
            .map(|((mi, set), gi)| set.project(&mi.add_scaled(gi, -eta)))
            .collect::<Result<_>>()?;
        path_length_sq.push(
            m.iter()
                .zip(&m_next)
                .map(|(a, b)| a.frobenius_distance(b).powi(2))
                .sum(),
        );
        losses_next.push(pot.loss(t, &m_next, &env, &signal)?);
        delta_cost.push(cost.delta_cost(t, d_bound).value);
        dist_variation.push((&ws[t + 1] - &ws[t]).norm());

        x = sys.a() * x + drive + &ws[t];
        m = m_next;
        m_hist.push(m.clone());
    }

    let c_m = sets
        .iter()
        .zip(&grad_norm_max)
        .map(|(set, g)| (set.diameter() / eta + g).powi(2))
        .sum();
    let initial_gap = losses[0] - c_inf;
    Ok(EqGapReport {
        rounds: cfg.rounds,
        h: cfg.h,
        eta,
        smoothness,
        stride,
        kappa_bar,
        gamma_bar,
        d_bound,
        g_bound,
        grad_norm_max,
        diameters: sets.iter().map(|s| s.diameter()).collect(),
        c_m,
        c_inf,
        initial_gap,
        eval_rounds,
        br: br_rows,
        eqgap,
        avg_eqgap_sq,
        losses,
        losses_next,
        realized_costs,
        path_length_sq,
        delta_cost,
        dist_variation,
        ws,
        m_hist,
        br_converged,
    })
}

/// Second-order path-length inequality on a recorded run:
/// `sum_t sum_i ||M_{i,t+1} - M_{i,t}||^2 <= 2 eta sum_t (l_t(M_t) - l_t(M_{t+1})) + tol`.
/// Holds whenever the stepsize does not exceed the reciprocal smoothness.
pub fn path_length_check(report: &EqGapReport, tol: f64) -> bool {
    let lhs: f64 = report.path_length_sq.iter().sum();
    let decrease: f64 = report
        .losses
        .iter()
        .zip(&report.losses_next)
        .map(|(cur, next)| cur - next)
        .sum();
    lhs <= 2.0 * report.eta * decrease + tol
}

/// Per-round gap chain on a recorded run:
/// `EQGAP_t^2 <= C_M sum_i ||M_{i,t+1} - M_{i,t}||^2 + tol` at every
/// evaluated round. The solver can only under-estimate gaps, so the measured
/// left side is conservative.
pub fn eqgap_chain_check(report: &EqGapReport, tol: f64) -> bool {
    report
        .eval_rounds
        .iter()
        .zip(&report.eqgap)
        .all(|(&t, &gap)| gap * gap <= report.c_m * report.path_length_sq[t] + tol)
}

/// Sampled one-step deviation inequality on a recorded run: for random
/// feasible `M_i`,
/// `l_t(M_i, M_{-i,t}) - l_t(M_t) >= -(diam_i / eta + ||grad||_max) ||M_{i,t+1} - M_{i,t}|| - tol`.
pub fn deviation_check(
    sys: &LdsSystem,
    ks: &[DMatrix<f64>],
    cost: &dyn CostOracle,
    report: &EqGapReport,
    samples_per_round: usize,
    seed: u64,
    tol: f64,
) -> Result<bool> {
    let n = sys.n_agents();
    let d = sys.dim();
    let b_list: Vec<DMatrix<f64>> = (0..n).map(|i| sys.b(i).clone()).collect();
    let mut a_bar = sys.a().clone();
    for (c, k) in ks.iter().enumerate() {
        a_bar -= sys.b(c) * k;
    }
    let stack = TransferStack::new(a_bar, b_list, report.h)?;
    let pot = JointPotential::new(&stack, ks, cost)?;
    let tau = 2.0 * report.kappa_bar * report.kappa_bar;
    let sets: Vec<DacSet> = (0..n)
        .map(|i| {
            DacSet::with_tau(tau, report.kappa_bar, report.gamma_bar, report.h, ks[i].nrows(), d)
        })
        .collect::<Result<_>>()?;
    let mut rng = stream_rng(seed, &[0xd4]);
    let check_stride = 1.max(report.rounds / 64);
    for t in (0..report.rounds).step_by(check_stride) {
        let env = window_at(&report.ws, d, t, report.h + 1);
        let signal = window_at(&report.ws, d, t, 2 * report.h + 1);
        let base = pot.loss(t, &report.m_hist[t], &env, &signal)?;
        for i in 0..n {
            let slack = (sets[i].diameter() / report.eta + report.grad_norm_max[i])
                * report.m_hist[t][i].frobenius_distance(&report.m_hist[t + 1][i]);
            for _ in 0..samples_per_round {
                let mut probe = report.m_hist[t].clone();
                probe[i] = sets[i].sample(&mut rng);
                let value = pot.loss(t, &probe, &env, &signal)?;
                if value - base < -slack - tol {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{LowerBoundCost, QuadraticTracking};
    use crate::lds_core::DisturbanceKind;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn duo() -> (LdsSystem, Vec<DMatrix<f64>>) {
        let sys = LdsSystem::new(
            DMatrix::from_element(1, 1, 0.5),
            vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 0.7),
            ],
            1.0,
        )
        .unwrap();
        let ks = vec![
            DMatrix::from_element(1, 1, 0.2),
            DMatrix::from_element(1, 1, 0.3),
        ];
        (sys, ks)
    }

    fn shared_cost(lambda: f64) -> QuadraticTracking {
        QuadraticTracking::constant_targets(
            DVector::from_element(1, 0.3),
            DVector::zeros(2),
            lambda,
        )
        .unwrap()
    }

    fn constant_gen(v: f64) -> DisturbanceGenerator {
        DisturbanceGenerator::new(DisturbanceKind::ConstantVector { v: vec![v] }, 1, 1.0, 0)
            .unwrap()
    }

    fn joint_stack(sys: &LdsSystem, ks: &[DMatrix<f64>], h: usize) -> TransferStack {
        let mut a_bar = sys.a().clone();
        let mut b_list = Vec::new();
        for (c, k) in ks.iter().enumerate() {
            a_bar -= sys.b(c) * k;
            b_list.push(sys.b(c).clone());
        }
        TransferStack::new(a_bar, b_list, h).unwrap()
    }

    fn const_window(v: f64, dim: usize, len: usize) -> Vec<DVector<f64>> {
        vec![DVector::from_element(dim, v); len]
    }

    #[test]
    fn joint_grads_match_finite_differences() {
        let a = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.2, 0.3]);
        let b = vec![
            DMatrix::from_row_slice(2, 1, &[1.0, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.8, -0.1]),
        ];
        let sys = LdsSystem::new(a, b, 1.0).unwrap();
        let ks = vec![
            DMatrix::from_row_slice(1, 2, &[0.1, -0.05]),
            DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.02, 0.1]),
        ];
        let h = 2;
        let stack = joint_stack(&sys, &ks, h);
        let cost = QuadraticTracking::constant_targets(
            DVector::from_column_slice(&[0.2, -0.1]),
            DVector::from_column_slice(&[0.0, 0.1, -0.2]),
            0.7,
        )
        .unwrap();
        let pot = JointPotential::new(&stack, &ks, &cost).unwrap();
        let mut rng = stream_rng(7, &[0]);
        let sets = [
            DacSet::with_tau(3.0, 1.5, 0.3, h, 1, 2).unwrap(),
            DacSet::with_tau(3.0, 1.5, 0.3, h, 2, 2).unwrap(),
        ];
        for trial in 0..20 {
            let params: Vec<DacParams> = sets.iter().map(|s| s.sample(&mut rng)).collect();
            let env: Vec<DVector<f64>> = (0..=h)
                .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let signal: Vec<DVector<f64>> = (0..=2 * h)
                .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let (_, grads) = pot.loss_and_grads(3, &params, &env, &signal).unwrap();
            let eps = 1e-6;
            for i in 0..2 {
                for blk in 0..h {
                    for r in 0..grads[i].block(blk).nrows() {
                        for c in 0..grads[i].block(blk).ncols() {
                            let mut up = params.clone();
                            up[i].blocks_mut()[blk][(r, c)] += eps;
                            let mut dn = params.clone();
                            dn[i].blocks_mut()[blk][(r, c)] -= eps;
                            let fd = (pot.loss(3, &up, &env, &signal).unwrap()
                                - pot.loss(3, &dn, &env, &signal).unwrap())
                                / (2.0 * eps);
                            let g = grads[i].block(blk)[(r, c)];
                            assert!(
                                (fd - g).abs() <= 1e-5 * (1.0 + g.abs()),
                                "trial {trial} agent {i} block {blk} ({r},{c}): fd {fd} vs {g}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn br_gap_nonnegative_and_zero_at_inner_minimizer() {
        let (sys, ks) = duo();
        let h = 2;
        let stack = joint_stack(&sys, &ks, h);
        let cost = shared_cost(0.6);
        let pot = JointPotential::new(&stack, &ks, &cost).unwrap();
        let sets = [
            DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap(),
            DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap(),
        ];
        let env = const_window(0.8, 1, h + 1);
        let signal = const_window(0.8, 1, 2 * h + 1);
        let mut params = vec![sets[0].zero_params(), sets[1].zero_params()];
        let opts = BrOptions::default();
        let first = best_response_gap(&pot, 0, &params, &sets[0], 4, &env, &signal, 0.05, &opts)
            .unwrap();
        assert!(first.converged);
        assert!(first.gap >= 0.0);
        assert!(first.gap > 1e-4, "zero start should be suboptimal here");
        params[0] = first.argmin;
        let second = best_response_gap(&pot, 0, &params, &sets[0], 4, &env, &signal, 0.05, &opts)
            .unwrap();
        assert!(second.gap >= 0.0);
        assert!(second.gap <= 10.0 * opts.tol, "residual gap {}", second.gap);
    }

    #[test]
    fn br_gap_matches_scalar_grid() {
        let (sys, ks) = duo();
        let h = 1;
        let stack = joint_stack(&sys, &ks, h);
        let cost = shared_cost(0.4);
        let pot = JointPotential::new(&stack, &ks, &cost).unwrap();
        let set0 = DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap();
        let set1 = DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap();
        let env = const_window(0.9, 1, h + 1);
        let signal = const_window(0.9, 1, 2 * h + 1);
        let params = vec![
            DacParams::new(vec![DMatrix::from_element(1, 1, 0.25)]).unwrap(),
            set1.sample(&mut stream_rng(3, &[1])),
        ];
        let solved =
            best_response_gap(&pot, 0, &params, &set0, 6, &env, &signal, 0.05, &BrOptions::default())
                .unwrap();
        let base = pot.loss(6, &params, &env, &signal).unwrap();
        let r = set0.radii()[0];
        let mut grid_min = f64::INFINITY;
        for j in 0..=2000 {
            let v = -r + 2.0 * r * j as f64 / 2000.0;
            let mut probe = params.clone();
            probe[0] = DacParams::new(vec![DMatrix::from_element(1, 1, v)]).unwrap();
            grid_min = grid_min.min(pot.loss(6, &probe, &env, &signal).unwrap());
        }
        assert!(
            (solved.gap - (base - grid_min)).abs() <= 1e-4,
            "solver gap {} vs grid gap {}",
            solved.gap,
            base - grid_min
        );
    }

    #[test]
    fn static_run_converges_and_average_gap_decreases() {
        let (sys, ks) = duo();
        let cost = shared_cost(0.5);
        let gen = constant_gen(0.8);
        let cfg = EqGapConfig::new(400, 2);
        let report = eqgap_run(&sys, &ks, &cost, &gen, &cfg).unwrap();
        assert!(report.br_converged);
        for &gap in &report.eqgap {
            assert!(gap >= 0.0);
        }
        let last = report.br.last().unwrap();
        for (i, &br) in last.iter().enumerate() {
            assert!(br <= 10.0 * cfg.br.tol, "agent {i} final gap {br}");
        }
        let half = report.avg_eqgap_sq_upto(200);
        let full = report.avg_eqgap_sq_final();
        assert!(
            full < half,
            "average squared gap should fall: half {half}, full {full}"
        );
    }

    #[test]
    fn frozen_cost_and_constant_disturbance_ledgers_are_zero() {
        let (sys, ks) = duo();
        let cost = shared_cost(0.5);
        let gen = constant_gen(0.6);
        let report = eqgap_run(&sys, &ks, &cost, &gen, &EqGapConfig::new(30, 1)).unwrap();
        assert!(report.delta_cost.iter().all(|&v| v == 0.0));
        assert!(report.dist_variation.iter().all(|&v| v == 0.0));
        assert!(report.initial_gap >= 0.0);
    }

    #[test]
    fn path_length_check_holds_with_tuned_step_and_fails_inflated() {
        // The negative control needs a time-varying loss whose optimum stays
        // deep inside the ball: with a frozen cost the loss-decrease sum
        // telescopes and stays nonnegative for any stepsize, and when the
        // optimum sits outside the ball the iterates freeze on the boundary.
        // An alternating control target over constant disturbances keeps the
        // curvature constant and the oscillation alive, so an oversized step
        // overshoots every round.
        let sys = LdsSystem::new(
            DMatrix::from_element(1, 1, 0.6),
            vec![DMatrix::from_element(1, 1, 1.0)],
            1.0,
        )
        .unwrap();
        let ks = vec![DMatrix::from_element(1, 1, 0.3)];
        let gen = constant_gen(0.5);
        let a_path = DisturbanceGenerator::new(
            DisturbanceKind::ConstantVector { v: vec![0.65] },
            1,
            1.0,
            0,
        )
        .unwrap();
        let b_path = DisturbanceGenerator::new(
            DisturbanceKind::SignSwitching {
                amplitude: 0.05,
                period: 1,
                direction: vec![1.0],
            },
            1,
            0.05,
            0,
        )
        .unwrap();
        let cost = QuadraticTracking::new(a_path, b_path, 0.5).unwrap();
        let tuned =
            eqgap_run(&sys, &ks, &cost, &gen, &EqGapConfig::new(120, 1).with_stride(10)).unwrap();
        assert!(path_length_check(&tuned, 1e-8));
        let inflated = eqgap_run(
            &sys,
            &ks,
            &cost,
            &gen,
            &EqGapConfig::new(120, 1)
                .with_eta(6.0 / tuned.smoothness)
                .with_stride(120),
        )
        .unwrap();
        assert!(
            !path_length_check(&inflated, 1e-8),
            "oversized stepsize must violate the path-length inequality"
        );
    }

    #[test]
    fn smoothness_estimate_on_linear_cost_hits_floor() {
        let sys = LdsSystem::new(
            DMatrix::zeros(1, 1),
            vec![DMatrix::from_element(1, 1, 1.0)],
            1.0,
        )
        .unwrap();
        let ks = vec![DMatrix::zeros(1, 1)];
        let h = 1;
        let stack = joint_stack(&sys, &ks, h);
        let cost = LowerBoundCost::new(1, 5);
        let pot = JointPotential::new(&stack, &ks, &cost).unwrap();
        let sets = vec![DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap()];
        let ctx = LossContext {
            t: 3,
            env: const_window(1.0, 1, h + 1),
            signal: const_window(1.0, 1, 2 * h + 1),
        };
        let l_hat = estimate_smoothness(&pot, &sets, &[ctx], 12, 9).unwrap();
        assert_eq!(l_hat, 1e-12, "linear losses have zero curvature");
    }

    #[test]
    fn smoothness_estimate_within_factor_two_of_scalar_hessian() {
        let sys = LdsSystem::new(
            DMatrix::from_element(1, 1, 0.5),
            vec![DMatrix::from_element(1, 1, 1.0)],
            1.0,
        )
        .unwrap();
        let ks = vec![DMatrix::from_element(1, 1, 0.2)];
        let h = 1;
        let stack = joint_stack(&sys, &ks, h);
        let lambda = 0.7;
        let cost = QuadraticTracking::constant_targets(
            DVector::from_element(1, 0.3),
            DVector::zeros(1),
            lambda,
        )
        .unwrap();
        let pot = JointPotential::new(&stack, &ks, &cost).unwrap();
        let sets = vec![DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap()];
        let w = 0.8;
        let ctx = LossContext {
            t: 2,
            env: const_window(w, 1, h + 1),
            signal: const_window(w, 1, 2 * h + 1),
        };
        // y = env part + (signal[1] + a_bar signal[2]) m and v = -K y + signal[0] m,
        // so the 1-D Hessian is 2 alpha^2 + 2 lambda beta^2.
        let a_bar = 0.3;
        let alpha = w + a_bar * w;
        let beta = -0.2 * alpha + w;
        let hess = 2.0 * alpha * alpha + 2.0 * lambda * beta * beta;
        let l_hat = estimate_smoothness(&pot, &sets, &[ctx], 10, 4).unwrap();
        assert!(l_hat >= hess - 1e-9, "estimate {l_hat} under Hessian {hess}");
        assert!(l_hat <= 2.0 * hess, "estimate {l_hat} above 2x Hessian {hess}");
        assert_relative_eq!(l_hat, 1.5 * hess, epsilon = 1e-9);
    }

    #[test]
    fn smoothness_estimate_monotone_in_samples() {
        let (sys, ks) = duo();
        let h = 2;
        let stack = joint_stack(&sys, &ks, h);
        let cost = shared_cost(0.5);
        let pot = JointPotential::new(&stack, &ks, &cost).unwrap();
        let sets = vec![
            DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap(),
            DacSet::with_tau(2.0, 1.0, 0.5, h, 1, 1).unwrap(),
        ];
        let mut rng = stream_rng(11, &[2]);
        let contexts: Vec<LossContext> = (0..3)
            .map(|j| LossContext {
                t: j + h + 1,
                env: (0..=h)
                    .map(|_| DVector::from_fn(1, |_, _| rng.gen_range(-1.0..1.0)))
                    .collect(),
                signal: (0..=2 * h)
                    .map(|_| DVector::from_fn(1, |_, _| rng.gen_range(-1.0..1.0)))
                    .collect(),
            })
            .collect();
        let l5 = estimate_smoothness(&pot, &sets, &contexts, 5, 21).unwrap();
        let l20 = estimate_smoothness(&pot, &sets, &contexts, 20, 21).unwrap();
        let l80 = estimate_smoothness(&pot, &sets, &contexts, 80, 21).unwrap();
        assert!(l5 <= l20 && l20 <= l80);
        assert!(l80 > 1e-12);
    }

    #[test]
    fn chain_and_deviation_checks_hold_on_recorded_run() {
        let (sys, ks) = duo();
        let cost = shared_cost(0.5);
        let gen = constant_gen(0.7);
        let report = eqgap_run(&sys, &ks, &cost, &gen, &EqGapConfig::new(80, 2)).unwrap();
        assert!(eqgap_chain_check(&report, 1e-9));
        assert!(deviation_check(&sys, &ks, &cost, &report, 6, 13, 1e-9).unwrap());
    }

    #[test]
    fn report_csv_shape_matches_eval_grid() {
        let (sys, ks) = duo();
        let cost = shared_cost(0.5);
        let gen = constant_gen(0.7);
        let report = eqgap_run(
            &sys,
            &ks,
            &cost,
            &gen,
            &EqGapConfig::new(20, 1).with_stride(5),
        )
        .unwrap();
        assert_eq!(report.eval_rounds, vec![0, 5, 10, 15]);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + report.eval_rounds.len() * 2);
        assert!(csv.starts_with("t,i,br,eqgap,cum_eqgap_sq_avg"));
        let realized_total: f64 = report.realized_costs.iter().sum();
        assert!(realized_total.is_finite());
    }
}
