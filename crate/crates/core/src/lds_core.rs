//! Shared linear dynamical system, disturbance generation, and simulation.
//!
//! The plant is `x_{t+1} = A x_t + sum_i B_i u_t^i + w_t` with N control
//! channels and a hard disturbance norm bound W. This module owns:
//!
//! * [`LdsSystem`]: the (A, B_1..B_N, W) tuple and the exact step map.
//! * [`DisturbanceGenerator`]: seeded, bounded, replayable disturbance
//!   sequences (six kinds).
//! * [`Agent`]: the act/observe round contract honored by every policy
//!   executor; the simulator passes each agent only the observations its
//!   information setting permits.
//! * [`simulate`]: the synchronous round loop producing a [`Trace`] that can
//!   be replayed exactly and exported to CSV.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dac_policy::DacParams;
use crate::costs::CostOracle;
use crate::error::{Error, Result};
use crate::linalg::{fmt_f64, stream_rng};

/// Information available to an agent when it digests a round.
///
/// Own-residual agents (setting 1) see only their own channel and treat
/// everything else as disturbance; shared-disturbance agents (setting 2)
/// additionally receive the aggregate effect of the other agents' controls,
/// which lets them recover the true `w_t`.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfoSetting {
    /// Setting 1: the agent recovers `w~_t = x_{t+1} - A x_t - B_i u_t^i`.
    OwnResidual,
    /// Setting 2: the agent additionally recovers the true disturbance
    /// `w_t = w~_t - sum_{j != i} B_j u_t^j`.
    SharedDisturbance,
}

impl InfoSetting {
    /// Conventional numeric label (1 or 2) used in configs and the CLI.
    pub fn index(self) -> u8 {
        match self {
            InfoSetting::OwnResidual => 1,
            InfoSetting::SharedDisturbance => 2,
        }
    }

    pub fn from_index(idx: u8) -> Result<Self> {
        match idx {
            1 => Ok(InfoSetting::OwnResidual),
            2 => Ok(InfoSetting::SharedDisturbance),
            other => Err(Error::Config(format!(
                "information setting must be 1 or 2, got {other}"
            ))),
        }
    }
}

/// The shared plant: `x_{t+1} = A x_t + sum_i B_i u_t^i + w_t`, `||w_t|| <= W`.
#[derive(Clone, Debug)]
pub struct LdsSystem {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    w_bound: f64,
}

impl LdsSystem {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>, w_bound: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::Dimension {
                context: "LdsSystem A",
                expected: "square, d >= 1".into(),
                got: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        if b.is_empty() {
            return Err(Error::Config("at least one control channel required".into()));
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.nrows() != d || bi.ncols() == 0 {
                return Err(Error::Dimension {
                    context: "LdsSystem B_i",
                    expected: format!("{d} rows, >=1 column (agent {i})"),
                    got: format!("{}x{}", bi.nrows(), bi.ncols()),
                });
            }
        }
        if !(w_bound > 0.0) {
            return Err(Error::Config(format!("W must be positive, got {w_bound}")));
        }
        Ok(Self { a, b, w_bound })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_agents(&self) -> usize {
        self.b.len()
    }

    pub fn control_dims(&self) -> Vec<usize> {
        self.b.iter().map(|bi| bi.ncols()).collect()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self, i: usize) -> &DMatrix<f64> {
        &self.b[i]
    }

    pub fn b_all(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn w_bound(&self) -> f64 {
        self.w_bound
    }

    /// One exact step of the plant. Both the simulator and trace replay call
    /// this single implementation, so replay reproduces states bit for bit.
    pub fn step(
        &self,
        x: &DVector<f64>,
        controls: &[DVector<f64>],
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let d = self.dim();
        if x.len() != d || w.len() != d {
            return Err(Error::Dimension {
                context: "step state/disturbance",
                expected: format!("{d}"),
                got: format!("x: {}, w: {}", x.len(), w.len()),
            });
        }
        if controls.len() != self.b.len() {
            return Err(Error::Dimension {
                context: "step controls",
                expected: format!("{} agents", self.b.len()),
                got: format!("{}", controls.len()),
            });
        }
        let mut next = &self.a * x;
        for (i, (bi, ui)) in self.b.iter().zip(controls).enumerate() {
            if ui.len() != bi.ncols() {
                return Err(Error::Dimension {
                    context: "step control vector",
                    expected: format!("k_{i} = {}", bi.ncols()),
                    got: format!("{}", ui.len()),
                });
            }
            next += bi * ui;
        }
        next += w;
        Ok(next)
    }

    /// Setting-aware disturbance recovery.
    ///
    /// Setting 1 returns the agent's residual `w~ = x_next - A x_prev - B_i u`
    /// (true disturbance plus the other agents' control effects); setting 2
    /// subtracts the supplied aggregate `sum_{j != i} B_j u^j` and returns the
    /// true disturbance.
    pub fn recover_disturbance(
        &self,
        i: usize,
        setting: InfoSetting,
        x_prev: &DVector<f64>,
        x_next: &DVector<f64>,
        own_u: &DVector<f64>,
        aggregate_other: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let residual = x_next - &self.a * x_prev - &self.b[i] * own_u;
        match setting {
            InfoSetting::OwnResidual => Ok(residual),
            InfoSetting::SharedDisturbance => {
                let agg = aggregate_other.ok_or_else(|| {
                    Error::Config(
                        "setting 2 recovery requires the aggregate of other agents' controls"
                            .into(),
                    )
                })?;
                Ok(residual - agg)
            }
        }
    }
}

/// Disturbance sequence families. Every kind is deterministic in
/// `(seed, t)` and norm-bounded by the generator's declared W.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DisturbanceKind {
    /// `w_t = v` for all t.
    ConstantVector { v: Vec<f64> },
    /// i.i.d. N(0, sigma^2) coordinates, norm-clipped at `clip`.
    ClippedGaussian { sigma: f64, clip: f64 },
    /// `w_t = amplitude * sin(2 pi t / period + phase) * dir` (unit dir).
    Sinusoidal {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
        direction: Vec<f64>,
    },
    /// `w_t = amplitude * (-1)^{floor(t/period)} * dir` (unit dir).
    SignSwitching {
        amplitude: f64,
        period: usize,
        direction: Vec<f64>,
    },
    /// `w_t = amplitude * b_t * e_1` with `b_t ~ Bernoulli(p)` i.i.d.
    BernoulliScalar { p: f64, amplitude: f64 },
    /// Explicit periodic sequence; index t reads entry `t mod len`.
    ExplicitSequence { seq: Vec<Vec<f64>> },
}

/// Seeded bounded disturbance source, replayable by (seed, t).
#[derive(Clone, Debug)]
pub struct DisturbanceGenerator {
    kind: DisturbanceKind,
    dim: usize,
    w_bound: f64,
    seed: u64,
}

fn unit_direction(raw: &[f64], dim: usize, what: &str) -> Result<DVector<f64>> {
    if raw.len() != dim {
        return Err(Error::Config(format!(
            "{what} direction has length {}, expected {dim}",
            raw.len()
        )));
    }
    let v = DVector::from_column_slice(raw);
    let n = v.norm();
    if n <= 0.0 {
        return Err(Error::Config(format!("{what} direction must be nonzero")));
    }
    Ok(v / n)
}

impl DisturbanceGenerator {
    /// Validates the parameterization against the bound `w_bound` (sup-norm
    /// of every emitted vector must stay within it) and fixes the seed.
    pub fn new(kind: DisturbanceKind, dim: usize, w_bound: f64, seed: u64) -> Result<Self> {
        if !(w_bound > 0.0) {
            return Err(Error::Config(format!("W must be positive, got {w_bound}")));
        }
        match &kind {
            DisturbanceKind::ConstantVector { v } => {
                if v.len() != dim {
                    return Err(Error::Config(format!(
                        "constant vector has length {}, expected {dim}",
                        v.len()
                    )));
                }
                let n = DVector::from_column_slice(v).norm();
                if n > w_bound {
                    return Err(Error::Config(format!(
                        "constant vector norm {n} exceeds W = {w_bound}"
                    )));
                }
            }
            DisturbanceKind::ClippedGaussian { sigma, clip } => {
                if !(*sigma >= 0.0) {
                    return Err(Error::Config("sigma must be nonnegative".into()));
                }
                if !(*clip > 0.0) || *clip > w_bound {
                    return Err(Error::Config(format!(
                        "clip level {clip} must lie in (0, W = {w_bound}]"
                    )));
                }
            }
            DisturbanceKind::Sinusoidal {
                amplitude,
                period,
                direction,
                ..
            } => {
                unit_direction(direction, dim, "sinusoidal")?;
                if !(*period > 0.0) {
                    return Err(Error::Config("sinusoidal period must be positive".into()));
                }
                if amplitude.abs() > w_bound {
                    return Err(Error::Config(format!(
                        "sinusoidal amplitude {amplitude} exceeds W = {w_bound}"
                    )));
                }
            }
            DisturbanceKind::SignSwitching {
                amplitude,
                period,
                direction,
            } => {
                unit_direction(direction, dim, "sign-switching")?;
                if *period == 0 {
                    return Err(Error::Config("sign-switching period must be >= 1".into()));
                }
                if amplitude.abs() > w_bound {
                    return Err(Error::Config(format!(
                        "sign-switching amplitude {amplitude} exceeds W = {w_bound}"
                    )));
                }
            }
            DisturbanceKind::BernoulliScalar { p, amplitude } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!("p = {p} must lie in [0,1]")));
                }
                if amplitude.abs() > w_bound {
                    return Err(Error::Config(format!(
                        "bernoulli amplitude {amplitude} exceeds W = {w_bound}"
                    )));
                }
            }
            DisturbanceKind::ExplicitSequence { seq } => {
                if seq.is_empty() {
                    return Err(Error::Config("explicit sequence must be nonempty".into()));
                }
                for (t, row) in seq.iter().enumerate() {
                    if row.len() != dim {
                        return Err(Error::Config(format!(
                            "explicit sequence entry {t} has length {}, expected {dim}",
                            row.len()
                        )));
                    }
                    let n = DVector::from_column_slice(row).norm();
                    if n > w_bound {
                        return Err(Error::Config(format!(
                            "explicit sequence entry {t} norm {n} exceeds W = {w_bound}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            kind,
            dim,
            w_bound,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn w_bound(&self) -> f64 {
        self.w_bound
    }

    pub fn kind(&self) -> &DisturbanceKind {
        &self.kind
    }

    /// Emit `w_t`. Random kinds derive a fresh stream from `(seed, t)` so the
    /// value does not depend on query order or history.
    pub fn generate(&self, t: usize) -> DVector<f64> {
        match &self.kind {
            DisturbanceKind::ConstantVector { v } => DVector::from_column_slice(v),
            DisturbanceKind::ClippedGaussian { sigma, clip } => {
                let mut rng = stream_rng(self.seed, &[0x01, t as u64]);
                let mut w =
                    DVector::from_fn(self.dim, |_, _| *sigma * rng.sample::<f64, _>(StandardNormal));
                let n = w.norm();
                if n > *clip {
                    w *= *clip / n;
                }
                w
            }
            DisturbanceKind::Sinusoidal {
                amplitude,
                period,
                phase,
                direction,
            } => {
                let dir = unit_direction(direction, self.dim, "sinusoidal").expect("validated");
                let s = (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
                dir * (*amplitude * s)
            }
            DisturbanceKind::SignSwitching {
                amplitude,
                period,
                direction,
            } => {
                let dir = unit_direction(direction, self.dim, "sign-switching").expect("validated");
                let sign = if (t / period) % 2 == 0 { 1.0 } else { -1.0 };
                dir * (*amplitude * sign)
            }
            DisturbanceKind::BernoulliScalar { p, amplitude } => {
                let mut rng = stream_rng(self.seed, &[0x02, t as u64]);
                let b = if rng.gen_bool(*p) { 1.0 } else { 0.0 };
                let mut w = DVector::zeros(self.dim);
                w[0] = *amplitude * b;
                w
            }
            DisturbanceKind::ExplicitSequence { seq } => {
                DVector::from_column_slice(&seq[t % seq.len()])
            }
        }
    }
}

/// Round observation handed to an agent after the environment stepped.
///
/// `aggregate_other` is `Some` only for shared-disturbance agents; the
/// simulator never passes other agents' information to own-residual agents.
pub struct Observation<'a> {
    pub t: usize,
    pub x: &'a DVector<f64>,
    pub u_own: &'a DVector<f64>,
    pub aggregate_other: Option<&'a DVector<f64>>,
    pub x_next: &'a DVector<f64>,
}

/// Round contract for policy executors.
///
/// Per round: every agent `act`s on the current state, the environment steps,
/// then every agent `observe`s the outcome. `observe` returns the disturbance
/// signal the agent recovered (its `w_est` in the trace).
pub trait Agent {
    fn control_dim(&self) -> usize;

    fn setting(&self) -> InfoSetting;

    fn act(&mut self, t: usize, x: &DVector<f64>) -> DVector<f64>;

    fn observe(&mut self, obs: &Observation<'_>) -> Result<DVector<f64>>;

    /// Current DAC parameters, if this agent plays a DAC policy.
    fn dac_params(&self) -> Option<&DacParams> {
        None
    }
}

/// Fixed linear policy `u = -K x`; reports its own residual as `w_est`.
pub struct LinearAgent {
    k: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearAgent {
    pub fn new(k: DMatrix<f64>, sys: &LdsSystem, i: usize) -> Self {
        Self {
            k,
            a: sys.a().clone(),
            b: sys.b(i).clone(),
        }
    }
}

impl Agent for LinearAgent {
    fn control_dim(&self) -> usize {
        self.k.nrows()
    }

    fn setting(&self) -> InfoSetting {
        InfoSetting::OwnResidual
    }

    fn act(&mut self, _t: usize, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<DVector<f64>> {
        Ok(obs.x_next - &self.a * obs.x - &self.b * obs.u_own)
    }
}

/// One per-(round, agent) trace record.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub t: usize,
    pub agent: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub w_est: DVector<f64>,
    pub cost: f64,
}

/// Full simulation record: states `x_0..x_T`, per-round rows, and optionally
/// the per-agent DAC parameter history.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub dim: usize,
    pub control_dims: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub rows: Vec<TraceRow>,
    /// `m_hist[t][i]` = agent i's DAC parameters when acting at round t
    /// (empty unless recording was requested).
    pub m_hist: Vec<Vec<Option<DacParams>>>,
}

impl Trace {
    pub fn rounds(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn n_agents(&self) -> usize {
        self.control_dims.len()
    }

    pub fn row(&self, t: usize, agent: usize) -> &TraceRow {
        &self.rows[t * self.n_agents() + agent]
    }

    /// Controls of agent `i` over all rounds.
    pub fn controls_of(&self, i: usize) -> Vec<DVector<f64>> {
        (0..self.rounds()).map(|t| self.row(t, i).u.clone()).collect()
    }

    /// Realized per-round costs of agent `i`.
    pub fn costs_of(&self, i: usize) -> Vec<f64> {
        (0..self.rounds()).map(|t| self.row(t, i).cost).collect()
    }

    /// Recovered disturbance signals of agent `i`.
    pub fn w_est_of(&self, i: usize) -> Vec<DVector<f64>> {
        (0..self.rounds())
            .map(|t| self.row(t, i).w_est.clone())
            .collect()
    }

    /// True disturbances `w_0..w_{T-1}`.
    pub fn disturbances(&self) -> Vec<DVector<f64>> {
        (0..self.rounds()).map(|t| self.row(t, 0).w.clone()).collect()
    }

    /// Re-steps the plant from `x_0` with the recorded controls and
    /// disturbances; stored states must match exactly (bit for bit).
    pub fn verify_replay(&self, sys: &LdsSystem) -> Result<()> {
        let n = self.n_agents();
        let mut x = self.states[0].clone();
        for t in 0..self.rounds() {
            let us: Vec<DVector<f64>> = (0..n).map(|i| self.row(t, i).u.clone()).collect();
            let next = sys.step(&x, &us, &self.row(t, 0).w)?;
            if next != self.states[t + 1] {
                return Err(Error::Numerical(format!(
                    "trace replay mismatch at round {t}"
                )));
            }
            x = next;
        }
        Ok(())
    }

    /// CSV export: `t, x[..], agent, u[..] (padded to max k), w[..],
    /// w_est[..], cost`, floats with 17 significant digits.
    pub fn to_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        use std::io::Write;
        let kmax = self.control_dims.iter().copied().max().unwrap_or(0);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|j| format!("x{j}")));
        header.push("agent".into());
        header.extend((0..kmax).map(|j| format!("u{j}")));
        header.extend((0..self.dim).map(|j| format!("w{j}")));
        header.extend((0..self.dim).map(|j| format!("w_est{j}")));
        header.push("cost".into());
        writeln!(f, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells = vec![row.t.to_string()];
            cells.extend(row.x.iter().map(|&v| fmt_f64(v)));
            cells.push(row.agent.to_string());
            cells.extend(row.u.iter().map(|&v| fmt_f64(v)));
            cells.extend((row.u.len()..kmax).map(|_| String::new()));
            cells.extend(row.w.iter().map(|&v| fmt_f64(v)));
            cells.extend(row.w_est.iter().map(|&v| fmt_f64(v)));
            cells.push(fmt_f64(row.cost));
            writeln!(f, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Simulation options; `x0 = None` means the zero state.
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub rounds: usize,
    pub x0: Option<DVector<f64>>,
    pub divergence_guard: f64,
    pub record_m_hist: bool,
}

impl SimOptions {
    pub fn rounds(rounds: usize) -> Self {
        Self {
            rounds,
            x0: None,
            divergence_guard: 1e9,
            record_m_hist: false,
        }
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn with_m_hist(mut self) -> Self {
        self.record_m_hist = true;
        self
    }
}

/// Run the synchronous protocol for `opts.rounds` rounds.
///
/// Round t: all agents act on `x_t`; the disturbance `w_t` is drawn; the
/// plant steps; each agent observes the outcome permitted by its setting and
/// reports its recovered disturbance. Costs are charged at `(x_t, u_t^i)`.
pub fn simulate(
    sys: &LdsSystem,
    agents: &mut [Box<dyn Agent>],
    gen: &DisturbanceGenerator,
    cost: &dyn CostOracle,
    opts: &SimOptions,
) -> Result<Trace> {
    let d = sys.dim();
    let n = sys.n_agents();
    if agents.len() != n {
        return Err(Error::Dimension {
            context: "simulate agents",
            expected: format!("{n}"),
            got: format!("{}", agents.len()),
        });
    }
    if gen.dim() != d {
        return Err(Error::Dimension {
            context: "simulate generator",
            expected: format!("{d}"),
            got: format!("{}", gen.dim()),
        });
    }
    for (i, ag) in agents.iter().enumerate() {
        if ag.control_dim() != sys.b(i).ncols() {
            return Err(Error::Dimension {
                context: "simulate agent control dim",
                expected: format!("k_{i} = {}", sys.b(i).ncols()),
                got: format!("{}", ag.control_dim()),
            });
        }
    }
    let x0 = opts.x0.clone().unwrap_or_else(|| DVector::zeros(d));
    if x0.len() != d {
        return Err(Error::Dimension {
            context: "simulate x0",
            expected: format!("{d}"),
            got: format!("{}", x0.len()),
        });
    }

    let mut trace = Trace {
        dim: d,
        control_dims: sys.control_dims(),
        states: Vec::with_capacity(opts.rounds + 1),
        rows: Vec::with_capacity(opts.rounds * n),
        m_hist: Vec::new(),
    };
    trace.states.push(x0);

    for t in 0..opts.rounds {
        let x_t = trace.states[t].clone();
        if opts.record_m_hist {
            trace
                .m_hist
                .push(agents.iter().map(|a| a.dac_params().cloned()).collect());
        }
        let us: Vec<DVector<f64>> = agents.iter_mut().map(|a| a.act(t, &x_t)).collect();
        let w_t = gen.generate(t);
        let x_next = sys.step(&x_t, &us, &w_t)?;
        let norm = x_next.norm();
        if !norm.is_finite() || norm > opts.divergence_guard {
            return Err(Error::Divergence {
                round: t,
                norm,
                guard: opts.divergence_guard,
            });
        }
        // Total control effect, reused to form each agent's "others" term.
        let mut total = DVector::zeros(d);
        for (i, ui) in us.iter().enumerate() {
            total += sys.b(i) * ui;
        }
        for (i, agent) in agents.iter_mut().enumerate() {
            let aggregate = match agent.setting() {
                InfoSetting::OwnResidual => None,
                InfoSetting::SharedDisturbance => Some(&total - sys.b(i) * &us[i]),
            };
            let obs = Observation {
                t,
                x: &x_t,
                u_own: &us[i],
                aggregate_other: aggregate.as_ref(),
                x_next: &x_next,
            };
            let w_est = agent.observe(&obs)?;
            trace.rows.push(TraceRow {
                t,
                agent: i,
                x: x_t.clone(),
                u: us[i].clone(),
                w: w_t.clone(),
                w_est,
                cost: cost.value(t, &x_t, &us[i]),
            });
        }
        trace.states.push(x_next);
    }
    Ok(trace)
}
