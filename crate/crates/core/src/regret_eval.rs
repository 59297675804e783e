//! Counterfactual rollouts, best-in-hindsight comparators over the linear and
//! DAC policy classes, regret reports and curves, and the scalar lower-bound
//! experiments.
//!
//! A comparator replay holds every other agent's control sequence fixed at the
//! recorded values and re-runs agent i's policy against the same disturbances.
//! Rollouts propagate the state *difference* from the recorded trajectory
//! (`delta_{t+1} = A delta_t + B_i (u'_t - u_t)`), which makes replaying the
//! recorded controls reproduce the recorded states bit for bit and keeps the
//! counterfactual state affine in the comparator's DAC blocks.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::costs::{CostOracle, LowerBoundCost};
use crate::counterfactual::{windowed_surrogate_loss, TransferStack};
use crate::dac_policy::{DacParams, DacSet};
use crate::error::{Error, Result};
use crate::gpc_agent::{AgentConfig, GpcAgent};
use crate::lds_core::{
    simulate, Agent, DisturbanceGenerator, DisturbanceKind, InfoSetting, LdsSystem, SimOptions,
    Trace,
};
use crate::linalg::{
    fmt_f64, least_squares_slope, power_iteration, spectral_norm, stream_rng, subseed,
};
use crate::stability::certify;

/// Policy replayed for agent i inside a recorded trace.
pub enum ReplayPolicy<'a> {
    /// `u_t = -K x_t` on the counterfactual trajectory.
    Linear(&'a DMatrix<f64>),
    /// `u_t = -K x_t + sum_p M^[p-1] s_{t-p}` with the setting-appropriate
    /// signal `s` extracted from the trace.
    Dac(&'a DMatrix<f64>, &'a DacParams),
    /// An explicit control sequence (one entry per round).
    Sequence(&'a [DVector<f64>]),
}

/// Everything a rollout needs from a trace, precomputed once: recorded states
/// and controls for agent i, and the signal sequence a DAC comparator would
/// consume (own residual, or the true disturbance).
struct ReplayData {
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    signal: Vec<DVector<f64>>,
}

fn replay_data(trace: &Trace, sys: &LdsSystem, i: usize, setting: InfoSetting) -> ReplayData {
    let rounds = trace.rounds();
    let us = trace.controls_of(i);
    let signal = match setting {
        // Own-channel residual: everything beyond A x + B_i u_i. Others'
        // controls are held fixed, so the sequence is policy-independent.
        InfoSetting::OwnResidual => (0..rounds)
            .map(|t| &trace.states[t + 1] - sys.a() * &trace.states[t] - sys.b(i) * &us[t])
            .collect(),
        InfoSetting::SharedDisturbance => trace.disturbances(),
    };
    ReplayData {
        xs: trace.states.clone(),
        us,
        signal,
    }
}

/// Replay `policy` for agent i against a recorded trace, holding all other
/// agents' controls and the disturbances fixed; returns the per-round costs
/// `c_t(x'_t, u'_t)` for every recorded round.
pub fn counterfactual_rollout(
    trace: &Trace,
    sys: &LdsSystem,
    i: usize,
    policy: &ReplayPolicy<'_>,
    setting: InfoSetting,
    cost: &dyn CostOracle,
) -> Result<Vec<f64>> {
    if i >= trace.n_agents() {
        return Err(Error::Config(format!("agent {i} not in trace")));
    }
    let data = replay_data(trace, sys, i, setting);
    rollout_costs(&data, sys, i, policy, cost, None)
}

/// Core rollout in difference form. When `states_sink` is given, also records
/// the per-round counterfactual (state, control) pairs for the adjoint pass.
fn rollout_costs(
    data: &ReplayData,
    sys: &LdsSystem,
    i: usize,
    policy: &ReplayPolicy<'_>,
    cost: &dyn CostOracle,
    mut states_sink: Option<&mut Vec<(DVector<f64>, DVector<f64>)>>,
) -> Result<Vec<f64>> {
    let rounds = data.us.len();
    let d = sys.dim();
    let b_i = sys.b(i);
    if let ReplayPolicy::Sequence(seq) = policy {
        if seq.len() < rounds {
            return Err(Error::Config(format!(
                "control sequence has {} rounds, trace has {rounds}",
                seq.len()
            )));
        }
    }
    let mut delta = DVector::zeros(d);
    let mut costs = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let x = &data.xs[t] + &delta;
        let u = match policy {
            ReplayPolicy::Linear(k) => -(*k * &x),
            ReplayPolicy::Dac(k, m) => {
                let mut u = -(*k * &x);
                for p in 1..=m.h().min(t) {
                    u.gemv(1.0, m.block(p - 1), &data.signal[t - p], 1.0);
                }
                u
            }
            ReplayPolicy::Sequence(seq) => seq[t].clone(),
        };
        costs.push(cost.value(t, &x, &u));
        if let Some(sink) = states_sink.as_deref_mut() {
            sink.push((x.clone(), u.clone()));
        }
        delta = sys.a() * delta + b_i * (&u - &data.us[t]);
    }
    Ok(costs)
}

/// Grid specification for the certified linear comparator search.
#[derive(Clone, Debug)]
pub struct LinearGrid {
    /// Inclusive per-entry ranges, row-major over the k_i x d gain entries.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Points per entry.
    pub points: usize,
    /// A grid point is admitted only if its closed loop certifies with
    /// kappa <= max_kappa and gamma >= min_gamma.
    pub max_kappa: f64,
    pub min_gamma: f64,
}

#[derive(Clone, Debug)]
pub struct LinearSolveResult {
    pub k: DMatrix<f64>,
    /// Per-round comparator costs of the winning gain (all rounds).
    pub costs: Vec<f64>,
    /// Total over the optimized window.
    pub cost: f64,
    pub feasible_points: usize,
    pub total_points: usize,
}

/// Exhaustive certified grid minimization of the counterfactual cost over
/// linear gains. The induced cost is non-convex in the gain, so no descent
/// method is trusted here; intended for k_i * d <= 2.
#[allow(clippy::too_many_arguments)]
pub fn best_linear(
    trace: &Trace,
    sys: &LdsSystem,
    i: usize,
    grid: &LinearGrid,
    setting: InfoSetting,
    cost: &dyn CostOracle,
    h_start: usize,
) -> Result<LinearSolveResult> {
    let d = sys.dim();
    let k_dim = sys.b(i).ncols();
    let entries = k_dim * d;
    if grid.lo.len() != entries || grid.hi.len() != entries {
        return Err(Error::Config(format!(
            "grid needs {entries} entry ranges, got {}/{}",
            grid.lo.len(),
            grid.hi.len()
        )));
    }
    if grid.points == 0 {
        return Err(Error::Config("grid needs >= 1 point per entry".into()));
    }
    let total_f = (grid.points as f64).powi(entries as i32);
    if total_f > 1e7 {
        return Err(Error::Config(format!(
            "grid of {total_f:.0} points is too large; reduce resolution or gain dimension"
        )));
    }
    let total = total_f as usize;
    let data = replay_data(trace, sys, i, setting);
    let rounds = data.us.len();
    if h_start >= rounds {
        return Err(Error::Config(format!(
            "window start {h_start} beyond trace rounds {rounds}"
        )));
    }
    let evals: Vec<Option<(DMatrix<f64>, Vec<f64>, f64)>> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut idx = flat;
            let mut k = DMatrix::zeros(k_dim, d);
            for e in 0..entries {
                let step = idx % grid.points;
                idx /= grid.points;
                let frac = if grid.points == 1 {
                    0.0
                } else {
                    step as f64 / (grid.points - 1) as f64
                };
                k[(e / d, e % d)] = grid.lo[e] + frac * (grid.hi[e] - grid.lo[e]);
            }
            let cert = match certify(sys.a(), sys.b(i), &k) {
                Ok(c) => c,
                Err(_) => return None,
            };
            if cert.kappa > grid.max_kappa + 1e-12 || cert.gamma < grid.min_gamma - 1e-12 {
                return None;
            }
            let costs = rollout_costs(&data, sys, i, &ReplayPolicy::Linear(&k), cost, None)
                .expect("linear rollout");
            let windowed: f64 = costs[h_start..].iter().sum();
            Some((k, costs, windowed))
        })
        .collect();
    let mut best: Option<(DMatrix<f64>, Vec<f64>, f64)> = None;
    let mut feasible = 0usize;
    for eval in evals.into_iter().flatten() {
        feasible += 1;
        if best.as_ref().map_or(true, |b| eval.2 < b.2) {
            best = Some(eval);
        }
    }
    let (k, costs, windowed) =
        best.ok_or_else(|| Error::Config("no grid point certifies strong stability".into()))?;
    Ok(LinearSolveResult {
        k,
        costs,
        cost: windowed,
        feasible_points: feasible,
        total_points: total,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            iters: 20_000,
            tol: 1e-8,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub smoothness: f64,
}

#[derive(Clone, Debug)]
pub struct DacSolveResult {
    pub m: DacParams,
    /// Per-round comparator costs of the optimum (all rounds).
    pub costs: Vec<f64>,
    /// Total over the optimized window.
    pub cost: f64,
    pub diagnostics: SolverDiagnostics,
}

/// Total counterfactual cost and its gradient in the DAC blocks via one
/// forward rollout plus one adjoint (backward) pass.
struct DacObjective<'a> {
    data: &'a ReplayData,
    sys: &'a LdsSystem,
    i: usize,
    k_i: &'a DMatrix<f64>,
    cost: &'a dyn CostOracle,
    h_start: usize,
    h_end: usize,
    a_tilde: DMatrix<f64>,
}

impl DacObjective<'_> {
    fn value(&self, m: &DacParams) -> f64 {
        let costs = rollout_costs(
            self.data,
            self.sys,
            self.i,
            &ReplayPolicy::Dac(self.k_i, m),
            self.cost,
            None,
        )
        .expect("dac rollout");
        costs[self.h_start..self.h_end].iter().sum()
    }

    fn value_and_grad(&self, m: &DacParams) -> (f64, DacParams) {
        let mut traj = Vec::new();
        let costs = rollout_costs(
            self.data,
            self.sys,
            self.i,
            &ReplayPolicy::Dac(self.k_i, m),
            self.cost,
            Some(&mut traj),
        )
        .expect("dac rollout");
        let total: f64 = costs[self.h_start..self.h_end].iter().sum();
        let rounds = self.data.us.len();
        let d = self.sys.dim();
        let b_i = self.sys.b(self.i);
        let h = m.h();
        let mut blocks = vec![DMatrix::zeros(b_i.ncols(), d); h];
        // lambda_t carries dC/dx'_t; sweep t = rounds-1 down to 0 with
        // lambda holding lambda_{t+1} at the top of each step.
        let mut lambda = DVector::zeros(d);
        for t in (0..rounds).rev() {
            let active = t >= self.h_start && t < self.h_end;
            let (gx, gu) = if active {
                let (x, u) = &traj[t];
                (self.cost.grad_x(t, x, u), self.cost.grad_u(t, x, u))
            } else {
                (DVector::zeros(d), DVector::zeros(b_i.ncols()))
            };
            // dC/d(dac drive at t) = gu_t + B_i^T lambda_{t+1}
            let mut d_drive = gu.clone();
            d_drive.gemv_tr(1.0, b_i, &lambda, 1.0);
            for p in 1..=h.min(t) {
                blocks[p - 1].ger(1.0, &d_drive, &self.data.signal[t - p], 1.0);
            }
            let mut next = gx;
            next.gemv_tr(-1.0, self.k_i, &gu, 1.0);
            next.gemv_tr(1.0, &self.a_tilde, &lambda, 1.0);
            lambda = next;
        }
        (total, DacParams::new(blocks).expect("gradient blocks"))
    }

    /// Exact flat-coordinate model `(hessian, gradient at zero)` of the
    /// windowed total for quadratic costs. One forward Jacobian pass when the
    /// oracle exposes its curvature, otherwise n+1 adjoint probes.
    fn quadratic_model(&self, h: usize, kd: usize, dd: usize) -> (DMatrix<f64>, DVector<f64>) {
        if let Some((hxx, hxu, huu)) = self.cost.quad_hessian() {
            if hxx.shape() == (dd, dd) && hxu.shape() == (dd, kd) && huu.shape() == (kd, kd) {
                return self.model_from_hessian(&hxx, &hxu, &huu, h, kd, dd);
            }
        }
        self.model_from_probes(h, kd, dd)
    }

    /// Propagate the state Jacobian in the flat blocks along the zero-block
    /// trajectory and accumulate the exact quadratic model:
    /// `J^x_{t+1} = A~ J^x_t + B_i S_t` with `S_t` the signal selector
    /// (`S_t z = sum_p M^[p-1] s_{t-p}`), `J^u_t = -K_i J^x_t + S_t`, so
    /// `q = sum_t [Jx; Ju]^T H [Jx; Ju]` and `b = sum_t Jx^T gx + Ju^T gu`.
    fn model_from_hessian(
        &self,
        hxx: &DMatrix<f64>,
        hxu: &DMatrix<f64>,
        huu: &DMatrix<f64>,
        h: usize,
        kd: usize,
        dd: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = h * kd * dd;
        let b_i = self.sys.b(self.i);
        let mut q = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut delta = DVector::zeros(dd);
        let mut jx = DMatrix::zeros(dd, n);
        let mut jx_next = DMatrix::zeros(dd, n);
        let mut s_t = DMatrix::zeros(kd, n);
        let mut ju = DMatrix::zeros(kd, n);
        let mut hx_jx = DMatrix::zeros(dd, n);
        let mut hxu_ju = DMatrix::zeros(dd, n);
        let mut hu_ju = DMatrix::zeros(kd, n);
        for t in 0..self.h_end {
            s_t.fill(0.0);
            for p in 1..=h.min(t) {
                let s = &self.data.signal[t - p];
                let base = (p - 1) * kd * dd;
                for r in 0..kd {
                    for c in 0..dd {
                        s_t[(r, base + r * dd + c)] = s[c];
                    }
                }
            }
            ju.copy_from(&s_t);
            ju.gemm(-1.0, self.k_i, &jx, 1.0);
            let x = &self.data.xs[t] + &delta;
            let u = -(self.k_i * &x);
            if t >= self.h_start {
                let gx = self.cost.grad_x(t, &x, &u);
                let gu = self.cost.grad_u(t, &x, &u);
                b.gemv_tr(1.0, &jx, &gx, 1.0);
                b.gemv_tr(1.0, &ju, &gu, 1.0);
                hx_jx.gemm(1.0, hxx, &jx, 0.0);
                hxu_ju.gemm(1.0, hxu, &ju, 0.0);
                hu_ju.gemm(1.0, huu, &ju, 0.0);
                q.gemm_tr(1.0, &jx, &hx_jx, 1.0);
                q.gemm_tr(1.0, &jx, &hxu_ju, 1.0);
                q.gemm_tr(1.0, &hxu_ju, &jx, 1.0);
                q.gemm_tr(1.0, &ju, &hu_ju, 1.0);
            }
            delta = self.sys.a() * &delta + b_i * (&u - &self.data.us[t]);
            jx_next.gemm(1.0, &self.a_tilde, &jx, 0.0);
            jx_next.gemm(1.0, b_i, &s_t, 1.0);
            std::mem::swap(&mut jx, &mut jx_next);
        }
        (q, b)
    }

    /// Recover the model column by column from gradient differences around
    /// zero; exact for quadratic costs at n+1 adjoint passes.
    fn model_from_probes(&self, h: usize, kd: usize, dd: usize) -> (DMatrix<f64>, DVector<f64>) {
        let n = h * kd * dd;
        let zero = DacParams::zeros(h, kd, dd);
        let (_, g0) = self.value_and_grad(&zero);
        let b = DVector::from_vec(g0.to_flat());
        let mut q = DMatrix::zeros(n, n);
        let mut flat = vec![0.0; n];
        for j in 0..n {
            flat[j] = 1.0;
            let probe = DacParams::from_flat(&flat, h, kd, dd).expect("probe shape");
            flat[j] = 0.0;
            let (_, gj) = self.value_and_grad(&probe);
            q.set_column(j, &(DVector::from_vec(gj.to_flat()) - &b));
        }
        (q, b)
    }
}

/// Exact flat-coordinate solve for quadratic costs. The counterfactual state
/// is affine in the DAC blocks, so the windowed total is quadratic and its
/// gradient affine: `g(z) = q z + b`, with column j of `q` recovered from one
/// adjoint pass at the j-th basis point. The model is minimized over the
/// feasible set with an accelerated projected scheme whose iterations cost
/// O(n^2) instead of a trace rollout, and the result is only trusted after a
/// stationarity check against the true gradient.
fn quadratic_model_solve(
    objective: &DacObjective<'_>,
    set: &DacSet,
    solver: &SolverOptions,
    h: usize,
    kd: usize,
    dd: usize,
) -> Result<(DacParams, f64, SolverDiagnostics)> {
    let n = h * kd * dd;
    let (mut q, b) = objective.quadratic_model(h, kd, dd);
    // The Hessian is symmetric up to adjoint rounding.
    q = (&q + q.transpose()) * 0.5;
    let smoothness = spectral_norm(&q).max(1e-12);
    let step = 1.0 / smoothness;
    let project_flat = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let p = set.project(&DacParams::from_flat(v.as_slice(), h, kd, dd)?)?;
        Ok(DVector::from_vec(p.to_flat()))
    };

    let mut z: DVector<f64> = DVector::zeros(n);
    let mut y = z.clone();
    let mut momentum: f64 = 1.0;
    // Model value at the feasible start z = 0 (the model has no constant
    // term, so this is exactly 0).
    let mut value = 0.0f64;
    let mut iterations = 0usize;
    let mut stalled = 0usize;
    let inner_tol = (solver.tol * 1e-2).max(1e-13);
    while iterations < 100_000 {
        iterations += 1;
        let gy = &q * &y + &b;
        let mut z_next = project_flat(&(&y - &gy * step))?;
        let mut v_next = 0.5 * (&q * &z_next).dot(&z_next) + b.dot(&z_next);
        if v_next > value + 1e-12 * (1.0 + value.abs()) {
            // Momentum overshot; fall back to a plain step from z.
            momentum = 1.0;
            let gz = &q * &z + &b;
            z_next = project_flat(&(&z - &gz * step))?;
            v_next = 0.5 * (&q * &z_next).dot(&z_next) + b.dot(&z_next);
        }
        // A singular model (structured signals) leaves the iterate drifting
        // along value-flat directions; stop once the value stagnates and let
        // the true-gradient validation below be the arbiter.
        if v_next >= value - 1e-14 * (1.0 + value.abs()) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        let z_prev = std::mem::replace(&mut z, z_next);
        value = v_next;
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &z + (&z - &z_prev) * ((momentum - 1.0) / next_momentum);
        momentum = next_momentum;
        let gz = &q * &z + &b;
        let cand = project_flat(&(&z - &gz * step))?;
        if (&z - &cand).norm() / step <= inner_tol || stalled >= 100 {
            break;
        }
    }
    let m = DacParams::from_flat(z.as_slice(), h, kd, dd)?;
    let (true_value, true_grad) = objective.value_and_grad(&m);
    let cand = set.project(&m.add_scaled(&true_grad, -step))?;
    let grad_norm = m.frobenius_distance(&cand) / step;
    Ok((
        m,
        true_value,
        SolverDiagnostics {
            iterations,
            grad_norm,
            converged: grad_norm <= solver.tol,
            smoothness,
        },
    ))
}

fn best_dac_window(
    trace: &Trace,
    sys: &LdsSystem,
    i: usize,
    k_i: &DMatrix<f64>,
    set: &DacSet,
    setting: InfoSetting,
    cost: &dyn CostOracle,
    solver: &SolverOptions,
    h_start: usize,
    h_end: usize,
) -> Result<DacSolveResult> {
    let data = replay_data(trace, sys, i, setting);
    let rounds = data.us.len();
    if h_start >= h_end || h_end > rounds {
        return Err(Error::Config(format!(
            "bad optimization window [{h_start}, {h_end}) for {rounds} rounds"
        )));
    }
    let objective = DacObjective {
        data: &data,
        sys,
        i,
        k_i,
        cost,
        h_start,
        h_end,
        a_tilde: sys.a() - sys.b(i) * k_i,
    };
    let h = set.h();
    let (kd, dd) = (sys.b(i).ncols(), sys.dim());
    let flat_dim = h * kd * dd;
    // Quadratic costs admit an exact model solve whose validation uses the
    // true gradient; the objective is convex, so a validated stationary point
    // is the global optimum and random restarts are redundant.
    let mut warm: Option<DacParams> = None;
    if cost.quadratic() && flat_dim <= 512 {
        let (m, value, diagnostics) = quadratic_model_solve(&objective, set, solver, h, kd, dd)?;
        if diagnostics.converged {
            let costs = rollout_costs(&data, sys, i, &ReplayPolicy::Dac(k_i, &m), cost, None)?;
            return Ok(DacSolveResult {
                m,
                costs,
                cost: value,
                diagnostics,
            });
        }
        warm = Some(m);
    }
    // Curvature scale by power iteration on gradient differences around zero
    // (exact Hessian action for quadratic costs).
    let zero = set.zero_params();
    let (_, g0) = objective.value_and_grad(&zero);
    let g0_flat = DVector::from_vec(g0.to_flat());
    let smoothness = power_iteration(flat_dim, 25, solver.seed ^ 0x51ac, |v| {
        let probe = DacParams::from_flat(v.as_slice(), h, kd, dd).expect("probe shape");
        let (_, g) = objective.value_and_grad(&zero.add_scaled(&probe, 1.0));
        DVector::from_vec(g.to_flat()) - &g0_flat
    })
    .max(1e-12);
    let base_step = 1.0 / smoothness;

    let mut best: Option<(DacParams, f64, SolverDiagnostics)> = None;
    for restart in 0..solver.restarts.max(1) {
        let mut m = if restart == 0 {
            warm.clone().unwrap_or_else(|| set.zero_params())
        } else {
            let mut rng = stream_rng(solver.seed, &[0xbd, restart as u64]);
            set.sample(&mut rng)
        };
        let mut value = objective.value(&m);
        let mut step = base_step;
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        let mut converged = false;
        while iterations < solver.iters {
            iterations += 1;
            let (_, grad) = objective.value_and_grad(&m);
            let cand = set.project(&m.add_scaled(&grad, -step))?;
            // Projected-gradient stationarity measure at the current point.
            grad_norm = m.frobenius_distance(&cand) / step;
            if grad_norm <= solver.tol {
                converged = true;
                break;
            }
            let cand_value = objective.value(&cand);
            if cand_value <= value + 1e-15 {
                m = cand;
                value = cand_value;
                step = (step * 1.1).min(base_step * 4.0);
            } else {
                step *= 0.5;
                if step < base_step * 1e-12 {
                    break;
                }
            }
        }
        let diag = SolverDiagnostics {
            iterations,
            grad_norm,
            converged,
            smoothness,
        };
        if best.as_ref().map_or(true, |b| value < b.1) {
            best = Some((m, value, diag));
        }
    }
    let (m, cost_total, diagnostics) = best.expect("at least one restart");
    let costs = rollout_costs(
        &data,
        sys,
        i,
        &ReplayPolicy::Dac(k_i, &m),
        cost,
        None,
    )?;
    Ok(DacSolveResult {
        m,
        costs,
        cost: cost_total,
        diagnostics,
    })
}

/// Offline projected gradient descent on the convex total counterfactual cost
/// over the DAC ball, with the agent's fixed feedback gain. Optimizes the
/// window `[h_start, T]`.
#[allow(clippy::too_many_arguments)]
pub fn best_dac(
    trace: &Trace,
    sys: &LdsSystem,
    i: usize,
    k_i: &DMatrix<f64>,
    set: &DacSet,
    setting: InfoSetting,
    cost: &dyn CostOracle,
    solver: &SolverOptions,
    h_start: usize,
) -> Result<DacSolveResult> {
    best_dac_window(
        trace,
        sys,
        i,
        k_i,
        set,
        setting,
        cost,
        solver,
        h_start,
        trace.rounds(),
    )
}

/// Winning comparator argument carried by a regret report.
#[derive(Clone, Debug)]
pub enum ComparatorArg {
    Linear(DMatrix<f64>),
    Dac(DacParams),
    Replay,
}

#[derive(Clone, Debug)]
pub struct RegretReport {
    pub agent: usize,
    pub comparator: String,
    pub h_start: usize,
    /// Full-horizon sums (t = 0..T).
    pub realized: f64,
    pub comparator_cost: f64,
    pub regret: f64,
    /// Post-burn-in sums (t = h_start..T).
    pub realized_tail: f64,
    pub comparator_tail: f64,
    pub regret_tail: f64,
    pub argument: ComparatorArg,
}

/// Assemble a regret report from realized trace costs and the comparator's
/// per-round costs, over the full horizon and the `[h_start, T]` tail.
pub fn regret(
    trace: &Trace,
    i: usize,
    comparator_costs: &[f64],
    h_start: usize,
    comparator: &str,
    argument: ComparatorArg,
) -> Result<RegretReport> {
    let realized_rounds = trace.costs_of(i);
    if comparator_costs.len() != realized_rounds.len() {
        return Err(Error::Config(format!(
            "comparator supplied {} rounds, trace has {}",
            comparator_costs.len(),
            realized_rounds.len()
        )));
    }
    if h_start >= realized_rounds.len() {
        return Err(Error::Config(format!(
            "burn-in start {h_start} beyond horizon {}",
            realized_rounds.len()
        )));
    }
    let realized: f64 = realized_rounds.iter().sum();
    let comparator_cost: f64 = comparator_costs.iter().sum();
    let realized_tail: f64 = realized_rounds[h_start..].iter().sum();
    let comparator_tail: f64 = comparator_costs[h_start..].iter().sum();
    Ok(RegretReport {
        agent: i,
        comparator: comparator.to_string(),
        h_start,
        realized,
        comparator_cost,
        regret: realized - comparator_cost,
        realized_tail,
        comparator_tail,
        regret_tail: realized_tail - comparator_tail,
        argument,
    })
}

/// Windowed global surrogate losses `l_t` for agent i along a recorded run
/// with parameter history: `l_t = c_t(y_t, v_t)` where y reads the realized
/// joint parameter window anchored at t-1 and v agent i's round-t blocks.
/// Entries are None until a full H+2 window of recorded parameters exists.
pub fn windowed_loss_series(
    trace: &Trace,
    sys: &LdsSystem,
    ks: &[DMatrix<f64>],
    cost: &dyn CostOracle,
    i: usize,
) -> Result<Vec<Option<f64>>> {
    let rounds = trace.rounds();
    let n = trace.n_agents();
    if ks.len() != n {
        return Err(Error::Config("one gain per agent required".into()));
    }
    if trace.m_hist.len() != rounds {
        return Err(Error::Config(
            "trace lacks parameter history; simulate with m_hist recording".into(),
        ));
    }
    let h = trace.m_hist[0][i]
        .as_ref()
        .ok_or_else(|| Error::Config("agent has no DAC parameters".into()))?
        .h();
    let mut a_cl = sys.a().clone();
    for (c, k) in ks.iter().enumerate() {
        a_cl -= sys.b(c) * k;
    }
    let stack = TransferStack::new(a_cl, (0..n).map(|c| sys.b(c).clone()).collect(), h)?;
    let ws = trace.disturbances();
    let mut out = Vec::with_capacity(rounds);
    for t in 0..rounds {
        if t < h + 1 {
            out.push(None);
            continue;
        }
        let window: Vec<Vec<DacParams>> = (0..=(h + 1))
            .map(|k| -> Result<Vec<DacParams>> {
                (0..n)
                    .map(|c| {
                        trace.m_hist[t - k][c]
                            .clone()
                            .ok_or_else(|| Error::Config("missing parameter history".into()))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let w_win: Vec<DVector<f64>> = (0..=(2 * h))
            .map(|l| {
                let idx = t as isize - 1 - l as isize;
                if idx >= 0 {
                    ws[idx as usize].clone()
                } else {
                    DVector::zeros(sys.dim())
                }
            })
            .collect();
        let loss = windowed_surrogate_loss(&stack, i, &window, &ks[i], cost, t, &w_win, &w_win)?;
        out.push(Some(loss));
    }
    Ok(out)
}

/// Segment regrets with per-segment DAC comparators:
/// returns (full `[0,T]`, head `[0,split)`, tail `[split,T]`) regrets.
/// The head+tail sum upper-bounds the full regret (segment minima only
/// improve on the full-horizon comparator).
#[allow(clippy::too_many_arguments)]
pub fn time_split_regret(
    trace: &Trace,
    sys: &LdsSystem,
    i: usize,
    k_i: &DMatrix<f64>,
    set: &DacSet,
    setting: InfoSetting,
    cost: &dyn CostOracle,
    solver: &SolverOptions,
    split: usize,
) -> Result<(f64, f64, f64)> {
    let rounds = trace.rounds();
    if split == 0 || split >= rounds {
        return Err(Error::Config(format!(
            "split {split} must lie strictly inside (0, {rounds})"
        )));
    }
    let realized = trace.costs_of(i);
    let full = best_dac_window(trace, sys, i, k_i, set, setting, cost, solver, 0, rounds)?;
    let head = best_dac_window(trace, sys, i, k_i, set, setting, cost, solver, 0, split)?;
    let tail = best_dac_window(trace, sys, i, k_i, set, setting, cost, solver, split, rounds)?;
    let realized_full: f64 = realized.iter().sum();
    let realized_head: f64 = realized[..split].iter().sum();
    let realized_tail: f64 = realized[split..].iter().sum();
    Ok((
        realized_full - full.cost,
        realized_head - head.cost,
        realized_tail - tail.cost,
    ))
}

#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub t: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct RegretCurve {
    pub points: Vec<CurvePoint>,
    /// Per-point raw values, `values[point][trial]`.
    pub values: Vec<Vec<f64>>,
    /// Least-squares slope of log(mean) vs log(T) over points with positive
    /// mean; None with fewer than 3 usable points.
    pub slope: Option<f64>,
}

impl RegretCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,trial,value\n");
        for (point, vals) in self.points.iter().zip(&self.values) {
            for (trial, v) in vals.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", point.t, trial, fmt_f64(*v)));
            }
        }
        out
    }
}

/// Evaluate `runner(T, trial)` over a horizon grid, in parallel, and fit a
/// log-log slope to the per-horizon means.
pub fn regret_curve(
    t_grid: &[usize],
    trials: usize,
    runner: &(dyn Fn(usize, usize) -> Result<f64> + Sync),
) -> Result<RegretCurve> {
    if t_grid.is_empty() || trials == 0 {
        return Err(Error::Config("empty horizon grid or zero trials".into()));
    }
    let jobs: Vec<(usize, usize)> = t_grid
        .iter()
        .flat_map(|&t| (0..trials).map(move |trial| (t, trial)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(t, trial)| runner(t, trial))
        .collect();
    let mut values = vec![Vec::with_capacity(trials); t_grid.len()];
    for (job_idx, res) in results.into_iter().enumerate() {
        values[job_idx / trials].push(res?);
    }
    let points: Vec<CurvePoint> = t_grid
        .iter()
        .zip(&values)
        .map(|(&t, vals)| {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let stderr = if vals.len() < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                (var / vals.len() as f64).sqrt()
            };
            CurvePoint { t, mean, stderr }
        })
        .collect();
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.mean > 0.0)
        .map(|p| ((p.t as f64).ln(), p.mean.ln()))
        .collect();
    let slope = if usable.len() >= 3 {
        let xs: Vec<f64> = usable.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = usable.iter().map(|p| p.1).collect();
        Some(least_squares_slope(&xs, &ys))
    } else {
        None
    };
    Ok(RegretCurve {
        points,
        values,
        slope,
    })
}

/// Which scalar hard instance to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowerBoundKind {
    /// A = 0, B = 1/2, w = 0, x_0 = 1; comparator: linear gains on [0, 1].
    Linear,
    /// A = 0, B = 1, w = 1, x_0 = 0, K = 0; comparator: equal-block DAC
    /// scalars on [-1, 1] (kappa = 1, gamma = 1/2, H = 1).
    Dac,
}

#[derive(Clone, Debug)]
pub struct LowerBoundPoint {
    pub t: usize,
    pub mean_regret: f64,
    pub stderr: f64,
    /// mean_regret / sqrt(T).
    pub ratio: f64,
    pub mean_cost_per_round: f64,
}

#[derive(Clone, Debug)]
pub struct LowerBoundReport {
    pub kind: LowerBoundKind,
    pub trials: usize,
    pub points: Vec<LowerBoundPoint>,
}

impl LowerBoundReport {
    /// max/min of the regret/sqrt(T) ratios across the horizon grid.
    pub fn ratio_spread(&self) -> f64 {
        let ratios: Vec<f64> = self.points.iter().map(|p| p.ratio).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,mean_regret,stderr,ratio,mean_cost_per_round\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.t,
                fmt_f64(p.mean_regret),
                fmt_f64(p.stderr),
                fmt_f64(p.ratio),
                fmt_f64(p.mean_cost_per_round)
            ));
        }
        out
    }
}

const LB_GRID_POINTS: usize = 101;

/// Closed-form comparator cost for the linear instance: for a gain k on
/// [0, 1], Phi(k) = sum_{t=1}^T (k^{t+1}/2^t x_0 (b_t - 1/2) + 1/2).
fn lb_phi_linear(cost: &LowerBoundCost, t_end: usize, x0: f64, k: f64) -> f64 {
    let mut phi = 0.0;
    let mut k_pow = k; // k^t at loop entry, times k once more below
    let mut half_pow = 1.0;
    for t in 1..=t_end {
        half_pow *= 0.5; // 1/2^t
        phi += k_pow * k * half_pow * x0 * cost.eps(t) + 0.5;
        k_pow *= k;
    }
    phi
}

/// Closed-form comparator cost for the DAC instance with H = 1:
/// Phi(m) = sum_{t=1}^T (m (b_t - 1/2) + 1/2).
fn lb_phi_dac(cost: &LowerBoundCost, t_end: usize, m: f64) -> f64 {
    (1..=t_end).map(|t| m * cost.eps(t) + 0.5).sum()
}

/// One lower-bound trial: runs the online agent for T+1 rounds, sums its
/// costs over t = 1..=T, and subtracts the grid minimum of the closed-form
/// comparator cost. Returns (regret, mean cost per round).
fn lower_bound_trial(kind: LowerBoundKind, t_end: usize, seed: u64) -> Result<(f64, f64)> {
    let (b_val, w_val, x0) = match kind {
        LowerBoundKind::Linear => (0.5, 0.0, 1.0),
        LowerBoundKind::Dac => (1.0, 1.0, 0.0),
    };
    let sys = LdsSystem::new(
        DMatrix::zeros(1, 1),
        vec![DMatrix::from_element(1, 1, b_val)],
        1.0,
    )?;
    let gen = DisturbanceGenerator::new(
        DisturbanceKind::ConstantVector { v: vec![w_val] },
        1,
        1.0,
        subseed(seed, &[0x17]),
    )?;
    let cost = std::sync::Arc::new(LowerBoundCost::new(1, subseed(seed, &[0x2b])));
    // Adversarial linear part K = 0; DAC ball pinned at kappa = 1,
    // gamma = 1/2, H = 1 so the equal-block comparator family is [-1, 1].
    let eta = 1.0 / (t_end as f64).sqrt();
    let cfg = AgentConfig::new(0, DMatrix::zeros(1, 1), 1.0, 0.5, 1, eta);
    let mut agents: Vec<Box<dyn Agent>> =
        vec![Box::new(GpcAgent::new(cfg, &sys, cost.clone())?)];
    let opts = SimOptions::rounds(t_end + 1).with_x0(DVector::from_element(1, x0));
    let trace = simulate(&sys, &mut agents, &gen, cost.as_ref(), &opts)?;
    let costs = trace.costs_of(0);
    let agent_cost: f64 = costs[1..=t_end].iter().sum();
    let mut comparator = f64::INFINITY;
    for j in 0..LB_GRID_POINTS {
        let frac = j as f64 / (LB_GRID_POINTS - 1) as f64;
        let phi = match kind {
            LowerBoundKind::Linear => lb_phi_linear(&cost, t_end, x0, frac),
            LowerBoundKind::Dac => lb_phi_dac(&cost, t_end, -1.0 + 2.0 * frac),
        };
        comparator = comparator.min(phi);
    }
    Ok((agent_cost - comparator, agent_cost / t_end as f64))
}

/// Monte-Carlo lower-bound experiment over a horizon grid.
pub fn lower_bound_experiment(
    kind: LowerBoundKind,
    t_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<LowerBoundReport> {
    if t_grid.is_empty() || trials == 0 {
        return Err(Error::Config("empty horizon grid or zero trials".into()));
    }
    let kind_tag = match kind {
        LowerBoundKind::Linear => 1u64,
        LowerBoundKind::Dac => 2u64,
    };
    let mut points = Vec::with_capacity(t_grid.len());
    for &t_end in t_grid {
        let trial_results: Vec<Result<(f64, f64)>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                lower_bound_trial(
                    kind,
                    t_end,
                    subseed(seed, &[kind_tag, t_end as u64, trial as u64]),
                )
            })
            .collect();
        let mut regrets = Vec::with_capacity(trials);
        let mut cost_rates = Vec::with_capacity(trials);
        for r in trial_results {
            let (reg, rate) = r?;
            regrets.push(reg);
            cost_rates.push(rate);
        }
        let mean = regrets.iter().sum::<f64>() / trials as f64;
        let stderr = if trials < 2 {
            0.0
        } else {
            let var = regrets.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (trials - 1) as f64;
            (var / trials as f64).sqrt()
        };
        points.push(LowerBoundPoint {
            t: t_end,
            mean_regret: mean,
            stderr,
            ratio: mean / (t_end as f64).sqrt(),
            mean_cost_per_round: cost_rates.iter().sum::<f64>() / trials as f64,
        });
    }
    Ok(LowerBoundReport {
        kind,
        trials,
        points,
    })
}
