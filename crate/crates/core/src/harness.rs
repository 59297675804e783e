//! Experiment harness: TOML configuration, scenario presets, orchestration
//! over (horizon, trial) cells, artifact emission, and the CLI surface.
//!
//! A config resolves to a fully concrete plan before anything runs: matrices
//! referenced as CSV files are inlined, missing gains are synthesized,
//! stability certificates are computed, and every (T, agent) pair gets a
//! pinned memory length and step size. The resolved plan is written next to
//! the results as `manifest.toml` together with the library version and the
//! certificates; feeding that manifest back through the same subcommand
//! reproduces every CSV byte for byte. While a run is in flight the manifest
//! carries `incomplete = true`; the flag is cleared only after the last cell
//! finished.
//!
//! Randomness: every stream derives from the master seed through fixed tags,
//! `subseed(seed, [TAG, T, trial])`, so cells are independent of execution
//! order and of `--jobs`. All parallel reductions below (and inside the
//! library solvers) are order-preserving, so worker count never changes
//! results.
//!
//! Float emission in CSVs goes through [`fmt_f64`] (17 significant digits).
//! Manifest floats use TOML's shortest round-trip encoding, which reloads
//! bit-exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{CostOracle, LowerBoundCost, QuadraticTracking};
use crate::counterfactual::BoundContext;
use crate::dac_policy::DacSet;
use crate::equilibrium::{eqgap_chain_check, eqgap_run, path_length_check, EqGapConfig};
use crate::error::{Error, Result};
use crate::gpc_agent::{
    tune_setting1, tune_setting2, tune_setting2_lipschitz, AgentConfig, GpcAgent, TuneSetting1,
    TuneSetting2,
};
use crate::lds_core::{
    simulate, Agent, DisturbanceGenerator, DisturbanceKind, InfoSetting, LdsSystem, SimOptions,
    Trace,
};
use crate::linalg::{fmt_f64, spectral_norm, subseed};
use crate::regret_eval::{
    best_dac, lower_bound_experiment, regret, regret_curve, ComparatorArg, LowerBoundKind,
    LowerBoundReport, RegretCurve, SolverOptions,
};
use crate::stability::{certify, certify_global, synthesize, StabilityCertificate};

/// Seed-path tags for the per-cell random streams.
const TAG_DISTURBANCE: u64 = 0xd5;
const TAG_COST_A: u64 = 0xc0;
const TAG_COST_B: u64 = 0xc1;
const TAG_COST_LB: u64 = 0x2b;
const TAG_EQGAP: u64 = 0xe9;

pub const MANIFEST_SCHEMA: &str = "magpc-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.toml";

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

/// Step-size/memory selection rule for one agent.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TuningRule {
    /// Own-residual guarantee: `eta = 1/(G W~ sqrt(T))`, `H = ln(kappa_i T)/gamma_i`.
    Thm31,
    /// Shared-disturbance guarantee: `eta = 1/(N sqrt(T))`, `H = ln(2 kappa N^2 sqrt(T))/gamma`.
    Thm33,
    /// Shared-disturbance, Lipschitz costs: `eta = 1/sqrt(T)`, `H = ln(2 kappa N sqrt(T))/gamma`.
    Thm34,
    /// Explicit `h` (and usually `eta`) from the config.
    Manual,
}

impl TuningRule {
    fn name(self) -> &'static str {
        match self {
            TuningRule::Thm31 => "thm31",
            TuningRule::Thm33 => "thm33",
            TuningRule::Thm34 => "thm34",
            TuningRule::Manual => "manual",
        }
    }
}

/// Square system matrix plus per-agent input matrices, inline or from CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_files: Option<Vec<String>>,
    pub w_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

/// Per-round cost family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostSpec {
    /// `||x - a_t||^2 + lambda ||u - b_t||^2`; targets either constant
    /// vectors or generator paths. The control target lives in one agent's
    /// control space; joint-action runs tile it across agents.
    QuadraticTracking {
        lambda: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        target_a: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        a_path: Option<DisturbanceKind>,
        #[serde(skip_serializing_if = "Option::is_none")]
        target_b: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        b_path: Option<DisturbanceKind>,
    },
    /// Scalar adversarial coin cost `u (b_t - 1/2) + 1/2`.
    LowerBound {},
}

/// One learning agent: gain source, information setting, tuning.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    /// Explicit stabilizing gain; synthesized by Riccati iteration when both
    /// `k` and `k_file` are absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_file: Option<String>,
    /// 1 = own residual, 2 = shared disturbance; falls back to the top-level
    /// `setting`, then to 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setting: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Optional certificate loosening (never tightening).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

/// Randomized-instance lower-bound experiment selector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerBoundSpec {
    pub kind: LbKind,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LbKind {
    Linear,
    Dac,
}

impl LbKind {
    fn to_library(self) -> LowerBoundKind {
        match self {
            LbKind::Linear => LowerBoundKind::Linear,
            LbKind::Dac => LowerBoundKind::Dac,
        }
    }
}

/// Equilibrium-tracking options (common-interest runs).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EqGapSpec {
    /// Best-response evaluation stride; default 1 for short runs, else
    /// ceil(T / 2000).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Fixed step size; absent means 1 / estimated smoothness.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothness_samples: Option<usize>,
}

/// Offline comparator solver budgets for `regret`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
}

impl SolverSpec {
    fn to_options(&self, seed: u64) -> SolverOptions {
        let mut opts = SolverOptions::default();
        if let Some(v) = self.iters {
            opts.iters = v;
        }
        if let Some(v) = self.tol {
            opts.tol = v;
        }
        if let Some(v) = self.restarts {
            opts.restarts = v;
        }
        opts.seed = seed;
        opts
    }
}

/// Post-run acceptance thresholds evaluated in `--check` mode; absent fields
/// are not checked.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    /// Every `mean regret / sqrt(T)` ratio must land in `[lo, hi]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_band: Option<[f64; 2]>,
    /// Max/min ratio across the horizon grid must stay below this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_ratio_spread: Option<f64>,
    /// `[target, tol]` band for the mean per-round cost at every horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_per_round: Option<[f64; 2]>,
    /// Log-log slope cap for the mean regret curve (full and post-burn-in).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_slope: Option<f64>,
    /// Cap on the final average squared equilibrium gap of every cell.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_final_avg_eqgap_sq: Option<f64>,
}

impl CheckSpec {
    fn is_empty(&self) -> bool {
        self.ratio_band.is_none()
            && self.max_ratio_spread.is_none()
            && self.cost_per_round.is_none()
            && self.max_slope.is_none()
            && self.max_final_avg_eqgap_sq.is_none()
    }
}

/// A complete experiment description. `t` and `t_grid` are alternatives; the
/// loader normalizes to `t_grid`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t_grid: Vec<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    /// Assumed per-agent control bound, used by thm31 tuning and audited
    /// after every simulation.
    #[serde(default = "default_u_bound")]
    pub u_bound: f64,
    /// Default information setting for agents that do not pin one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setting: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<AgentSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<LowerBoundSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eqgap: Option<EqGapSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
    #[serde(default, skip_serializing_if = "check_is_empty")]
    pub check: CheckSpec,
}

fn default_trials() -> usize {
    1
}

fn default_out_dir() -> String {
    "out".into()
}

fn default_u_bound() -> f64 {
    1.0
}

fn check_is_empty(c: &CheckSpec) -> bool {
    c.is_empty()
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: [&str; 5] = [
    "lower-bound-linear",
    "lower-bound-dac",
    "scalar-duopoly",
    "formation-toy",
    "grid-toy",
];

/// Built-in scenario configs, addressable from the CLI by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        // Adversarial scalar plant where any online algorithm pays
        // Omega(sqrt(T)) against the best linear gain in hindsight.
        "lower-bound-linear" => {
            r#"
            name = "lower-bound-linear"
            seed = 7
            trials = 200
            t_grid = [100, 1000, 10000]

            [lower_bound]
            kind = "linear"

            [check]
            ratio_band = [0.05, 5.0]
            max_ratio_spread = 2.0
            cost_per_round = [0.5, 0.01]
            "#
        }
        // Same scheme against the best DAC policy in hindsight.
        "lower-bound-dac" => {
            r#"
            name = "lower-bound-dac"
            seed = 7
            trials = 200
            t_grid = [100, 1000, 10000]

            [lower_bound]
            kind = "dac"

            [check]
            ratio_band = [0.05, 5.0]
            max_ratio_spread = 2.0
            "#
        }
        // Two agents pushing one scalar state toward a shared target:
        // the smallest common-interest instance, good for eqgap runs.
        "scalar-duopoly" => {
            r#"
            name = "scalar-duopoly"
            seed = 11
            trials = 1
            t_grid = [1024]
            setting = 2

            [system]
            a = [[0.5]]
            b = [[[1.0]], [[0.7]]]
            w_bound = 0.5

            [disturbance]
            kind = "constant-vector"
            v = [0.3]

            [cost]
            family = "quadratic-tracking"
            lambda = 0.5
            target_a = [0.3]
            target_b = [0.0]

            [[agents]]
            k = [[0.2]]
            tuning = "thm33"

            [[agents]]
            k = [[0.3]]
            tuning = "thm33"
            "#
        }
        // Two vehicles (position, velocity each) holding a unit spacing
        // under sinusoidal gusts; both minimize the same formation error.
        "formation-toy" => {
            r#"
            name = "formation-toy"
            seed = 23
            trials = 3
            t_grid = [512]
            setting = 2

            [system]
            a = [
                [1.0, 0.5, 0.0, 0.0],
                [0.0, 0.5, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.5],
                [0.0, 0.0, 0.0, 0.5],
            ]
            b = [
                [[0.0], [0.5], [0.0], [0.0]],
                [[0.0], [0.0], [0.0], [0.5]],
            ]
            w_bound = 0.2
            x0 = [0.0, 0.0, 0.0, 0.0]

            [disturbance]
            kind = "sinusoidal"
            amplitude = 0.2
            period = 40.0
            direction = [0.0, 1.0, 0.0, 1.0]

            [cost]
            family = "quadratic-tracking"
            lambda = 0.1
            target_a = [0.0, 0.0, 1.0, 0.0]
            target_b = [0.0]

            [[agents]]
            k = [[1.0, 0.4, 0.0, 0.0]]
            tuning = "thm33"

            [[agents]]
            k = [[0.0, 0.0, 1.0, 0.4]]
            tuning = "thm33"
            "#
        }
        // Three generators on a three-bus grid tracking sinusoidal demand
        // under switching renewable shocks, each seeing only its own
        // residual signal.
        "grid-toy" => {
            r#"
            name = "grid-toy"
            seed = 31
            trials = 3
            t_grid = [512]
            setting = 1
            u_bound = 2.0

            [system]
            a = [
                [0.70, 0.10, 0.00],
                [0.05, 0.80, 0.05],
                [0.00, 0.10, 0.60],
            ]
            b = [
                [[1.0], [0.0], [0.0]],
                [[0.0], [1.0], [0.0]],
                [[0.0], [0.0], [1.0]],
            ]
            w_bound = 0.15

            [disturbance]
            kind = "sign-switching"
            amplitude = 0.15
            period = 24
            direction = [1.0, 0.0, -1.0]

            [cost]
            family = "quadratic-tracking"
            lambda = 0.05
            target_b = [0.0]

            [cost.a_path]
            kind = "sinusoidal"
            amplitude = 0.5
            period = 96.0
            direction = [1.0, 1.0, 1.0]

            [[agents]]
            k = [[0.2, 0.0, 0.0]]
            tuning = "thm31"

            [[agents]]
            k = [[0.0, 0.2, 0.0]]
            tuning = "thm31"

            [[agents]]
            k = [[0.0, 0.0, 0.2]]
            tuning = "thm31"
            "#
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    parse_config_str(text)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    normalize(&mut cfg)?;
    Ok(cfg)
}

/// Read a config file; run manifests are accepted and unwrapped to the
/// resolved config they embed.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let value: toml::Value = toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    if value.get("schema").is_some() {
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported manifest schema '{}'",
                manifest.schema
            )));
        }
        let mut cfg = manifest.config;
        normalize(&mut cfg)?;
        Ok(cfg)
    } else {
        parse_config_str(&text)
    }
}

fn normalize(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Some(t) = cfg.t.take() {
        if !cfg.t_grid.is_empty() {
            return Err(Error::Config("give either t or t_grid, not both".into()));
        }
        cfg.t_grid = vec![t];
    }
    if cfg.t_grid.is_empty() {
        return Err(Error::Config("config needs a horizon: t or t_grid".into()));
    }
    if cfg.t_grid.iter().any(|&t| t == 0) {
        return Err(Error::Config("horizons must be >= 1".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if cfg.name.is_empty() {
        return Err(Error::Config("scenario name must be nonempty".into()));
    }
    if !(cfg.u_bound > 0.0) {
        return Err(Error::Config(format!(
            "control bound U must be positive, got {}",
            cfg.u_bound
        )));
    }
    if let Some(s) = cfg.setting {
        InfoSetting::from_index(s)?;
    }
    Ok(())
}

/// CLI-level field overrides, applied before resolution.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub t_grid: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub setting: Option<u8>,
    pub tuning: Option<TuningRule>,
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) -> Result<()> {
    if let Some(grid) = &ov.t_grid {
        if grid.is_empty() || grid.iter().any(|&t| t == 0) {
            return Err(Error::Config("horizon override must list T >= 1".into()));
        }
        cfg.t_grid = grid.clone();
    }
    if let Some(trials) = ov.trials {
        if trials == 0 {
            return Err(Error::Config("trials override must be >= 1".into()));
        }
        cfg.trials = trials;
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out_dir {
        cfg.out_dir = out.clone();
    }
    if let Some(setting) = ov.setting {
        InfoSetting::from_index(setting)?;
        cfg.setting = Some(setting);
        for a in &mut cfg.agents {
            a.setting = Some(setting);
        }
    }
    if let Some(rule) = ov.tuning {
        for a in &mut cfg.agents {
            a.tuning = Some(rule);
        }
    }
    Ok(())
}

/// Parse a numeric CSV into a dense matrix. Blank lines and `#` comments are
/// skipped; every data row must have the same number of columns.
pub fn parse_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::ConfigParse(format!(
                        "{}:{}: bad number '{}'",
                        path.display(),
                        lineno + 1,
                        cell.trim()
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "matrix file {} has no data rows",
            path.display()
        )));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "matrix file {} has ragged rows",
            path.display()
        )));
    }
    let nrows = rows.len();
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn nested_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Config(format!("{what} must be a nonempty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn matrix_to_nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Per-horizon resolved hyperparameters; `eta = None` marks agents whose
/// step size is picked at run time (eqgap self-tuning).
#[derive(Clone, Debug)]
pub struct CellPlan {
    pub t: usize,
    pub h: Vec<usize>,
    pub eta: Vec<Option<f64>>,
}

/// A config made fully concrete: matrices inlined, gains pinned,
/// certificates computed, hyperparameters resolved per horizon.
#[derive(Clone, Debug)]
pub struct Resolved {
    /// Normalized, self-contained copy (file references replaced by inline
    /// matrices) as embedded in the manifest.
    pub config: ExperimentConfig,
    pub sys: Option<LdsSystem>,
    pub x0: Option<DVector<f64>>,
    pub ks: Vec<DMatrix<f64>>,
    pub settings: Vec<InfoSetting>,
    pub global_cert: Option<StabilityCertificate>,
    /// The (kappa, gamma) pair each agent runs with: own-channel for
    /// setting 1, global for setting 2, loosened by config overrides.
    pub agent_bounds: Vec<(f64, f64)>,
    pub cells: Vec<CellPlan>,
}

fn load_matrix_field(
    inline: &Option<Vec<Vec<f64>>>,
    file: &Option<String>,
    base: &Path,
    what: &str,
) -> Result<DMatrix<f64>> {
    match (inline, file) {
        (Some(rows), None) => nested_to_matrix(rows, what),
        (None, Some(rel)) => parse_matrix_csv(&base.join(rel)),
        (Some(_), Some(_)) => Err(Error::Config(format!(
            "{what}: give an inline matrix or a file, not both"
        ))),
        (None, None) => Err(Error::Config(format!("{what}: missing matrix"))),
    }
}

/// Largest norm a generator kind can emit; the bound handed to the path
/// generators backing cost targets.
fn kind_sup(kind: &DisturbanceKind) -> f64 {
    let sup = match kind {
        DisturbanceKind::ConstantVector { v } => DVector::from_column_slice(v).norm(),
        DisturbanceKind::ExplicitSequence { seq } => seq
            .iter()
            .map(|r| DVector::from_column_slice(r).norm())
            .fold(0.0, f64::max),
        DisturbanceKind::Sinusoidal { amplitude, .. }
        | DisturbanceKind::SignSwitching { amplitude, .. }
        | DisturbanceKind::BernoulliScalar { amplitude, .. } => amplitude.abs(),
        DisturbanceKind::ClippedGaussian { clip, .. } => *clip,
    };
    sup.max(1.0)
}

fn kind_dim(kind: &DisturbanceKind, fallback: usize) -> usize {
    match kind {
        DisturbanceKind::ConstantVector { v } => v.len(),
        DisturbanceKind::ExplicitSequence { seq } => seq.first().map_or(0, Vec::len),
        DisturbanceKind::Sinusoidal { direction, .. }
        | DisturbanceKind::SignSwitching { direction, .. } => direction.len(),
        DisturbanceKind::ClippedGaussian { .. } | DisturbanceKind::BernoulliScalar { .. } => {
            fallback
        }
    }
}

/// Stack a control-space target kind across `n` identical agent blocks.
fn tile_kind(kind: &DisturbanceKind, n: usize) -> Result<DisturbanceKind> {
    let tile = |v: &Vec<f64>| -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            out.extend_from_slice(v);
        }
        out
    };
    match kind {
        DisturbanceKind::ConstantVector { v } => Ok(DisturbanceKind::ConstantVector { v: tile(v) }),
        DisturbanceKind::ExplicitSequence { seq } => Ok(DisturbanceKind::ExplicitSequence {
            seq: seq.iter().map(tile).collect(),
        }),
        // The generator normalizes directions, so tiling shrinks the emitted
        // per-block magnitude by sqrt(n); scale the amplitude to compensate.
        DisturbanceKind::Sinusoidal {
            amplitude,
            period,
            phase,
            direction,
        } => Ok(DisturbanceKind::Sinusoidal {
            amplitude: amplitude * (n as f64).sqrt(),
            period: *period,
            phase: *phase,
            direction: tile(direction),
        }),
        DisturbanceKind::SignSwitching {
            amplitude,
            period,
            direction,
        } => Ok(DisturbanceKind::SignSwitching {
            amplitude: amplitude * (n as f64).sqrt(),
            period: *period,
            direction: tile(direction),
        }),
        other => Err(Error::Config(format!(
            "control target kind {other:?} cannot be stacked across agents; \
             use constant-vector, explicit-sequence, sinusoidal, or sign-switching"
        ))),
    }
}

fn constant_kind(v: &[f64]) -> DisturbanceKind {
    DisturbanceKind::ConstantVector { v: v.to_vec() }
}

/// The target paths of a quadratic-tracking spec as (a_kind, b_kind).
fn tracking_paths(spec: &CostSpec) -> Result<(DisturbanceKind, DisturbanceKind, f64)> {
    match spec {
        CostSpec::QuadraticTracking {
            lambda,
            target_a,
            a_path,
            target_b,
            b_path,
        } => {
            if !(*lambda >= 0.0) {
                return Err(Error::Config(format!(
                    "tracking weight must be nonnegative, got {lambda}"
                )));
            }
            let a_kind = match (target_a, a_path) {
                (Some(v), None) => constant_kind(v),
                (None, Some(k)) => k.clone(),
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "give target_a or a_path, not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Config(
                        "quadratic tracking needs target_a or a_path".into(),
                    ))
                }
            };
            let b_kind = match (target_b, b_path) {
                (Some(v), None) => constant_kind(v),
                (None, Some(k)) => k.clone(),
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "give target_b or b_path, not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Config(
                        "quadratic tracking needs target_b or b_path".into(),
                    ))
                }
            };
            Ok((a_kind, b_kind, *lambda))
        }
        CostSpec::LowerBound {} => Err(Error::Config(
            "lower-bound cost has no target paths".into(),
        )),
    }
}

/// Instantiate the per-agent cost oracle (control target in one agent's
/// control space) for the given cell.
fn build_agent_cost(res: &Resolved, t: usize, trial: usize) -> Result<Arc<dyn CostOracle>> {
    let spec = res
        .config
        .cost
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs a [cost] section".into()))?;
    let d = res.sys.as_ref().map_or(1, LdsSystem::dim);
    match spec {
        CostSpec::LowerBound {} => Ok(Arc::new(LowerBoundCost::new(
            d,
            subseed(res.config.seed, &[TAG_COST_LB, t as u64, trial as u64]),
        ))),
        CostSpec::QuadraticTracking { .. } => {
            let (a_kind, b_kind, lambda) = tracking_paths(spec)?;
            let k0 = res.sys.as_ref().map_or(1, |s| s.b(0).ncols());
            let a_gen = DisturbanceGenerator::new(
                a_kind.clone(),
                d,
                kind_sup(&a_kind),
                subseed(res.config.seed, &[TAG_COST_A, t as u64, trial as u64]),
            )?;
            let b_gen = DisturbanceGenerator::new(
                b_kind.clone(),
                k0,
                kind_sup(&b_kind),
                subseed(res.config.seed, &[TAG_COST_B, t as u64, trial as u64]),
            )?;
            Ok(Arc::new(QuadraticTracking::new(a_gen, b_gen, lambda)?))
        }
    }
}

/// Instantiate the joint cost oracle on the stacked control space.
fn build_joint_cost(res: &Resolved, t: usize, trial: usize) -> Result<Arc<dyn CostOracle>> {
    let spec = res
        .config
        .cost
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs a [cost] section".into()))?;
    let sys = res
        .sys
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs a [system] section".into()))?;
    let d = sys.dim();
    let n = sys.n_agents();
    match spec {
        CostSpec::LowerBound {} => Ok(Arc::new(LowerBoundCost::new(
            d,
            subseed(res.config.seed, &[TAG_COST_LB, t as u64, trial as u64]),
        ))),
        CostSpec::QuadraticTracking { .. } => {
            let (a_kind, b_kind, lambda) = tracking_paths(spec)?;
            let b_joint = tile_kind(&b_kind, n)?;
            let k_total: usize = sys.control_dims().iter().sum();
            let a_gen = DisturbanceGenerator::new(
                a_kind.clone(),
                d,
                kind_sup(&a_kind),
                subseed(res.config.seed, &[TAG_COST_A, t as u64, trial as u64]),
            )?;
            let b_gen = DisturbanceGenerator::new(
                b_joint.clone(),
                k_total,
                kind_sup(&b_joint),
                subseed(res.config.seed, &[TAG_COST_B, t as u64, trial as u64]),
            )?;
            Ok(Arc::new(QuadraticTracking::new(a_gen, b_gen, lambda)?))
        }
    }
}

fn build_generator(res: &Resolved, t: usize, trial: usize) -> Result<DisturbanceGenerator> {
    let sys = res
        .sys
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs a [system] section".into()))?;
    let kind = res
        .config
        .disturbance
        .clone()
        .ok_or_else(|| Error::Config("this run needs a [disturbance] section".into()))?;
    DisturbanceGenerator::new(
        kind,
        sys.dim(),
        sys.w_bound(),
        subseed(res.config.seed, &[TAG_DISTURBANCE, t as u64, trial as u64]),
    )
}

/// Gradient-growth constant of the configured cost at magnitude `d_ball`.
fn cost_grad_bound(res_cost: &CostSpec, d: usize, k: usize, d_ball: f64) -> Result<f64> {
    let oracle: Arc<dyn CostOracle> = match res_cost {
        CostSpec::LowerBound {} => Arc::new(LowerBoundCost::new(d, 0)),
        CostSpec::QuadraticTracking { .. } => {
            let (a_kind, b_kind, lambda) = tracking_paths(res_cost)?;
            let a_gen = DisturbanceGenerator::new(a_kind.clone(), d, kind_sup(&a_kind), 0)?;
            let b_gen = DisturbanceGenerator::new(b_kind.clone(), k, kind_sup(&b_kind), 0)?;
            Arc::new(QuadraticTracking::new(a_gen, b_gen, lambda)?)
        }
    };
    Ok(oracle.grad_growth(d_ball))
}

/// Make every part of the config concrete. Pure: the same config resolves to
/// the same plan; referenced CSV files are read relative to `base` and
/// inlined into the returned config.
pub fn resolve(cfg: &ExperimentConfig, base: &Path) -> Result<Resolved> {
    let mut config = cfg.clone();
    normalize(&mut config)?;

    let mut sys = None;
    let mut x0 = None;
    let mut ks: Vec<DMatrix<f64>> = Vec::new();
    let mut settings: Vec<InfoSetting> = Vec::new();
    let mut global_cert = None;
    let mut agent_bounds: Vec<(f64, f64)> = Vec::new();

    if let Some(spec) = &mut config.system {
        let a = load_matrix_field(&spec.a, &spec.a_file, base, "system.a")?;
        if a.nrows() != a.ncols() {
            return Err(Error::Config(format!(
                "system matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let d = a.nrows();
        let b_list: Vec<DMatrix<f64>> = match (&spec.b, &spec.b_files) {
            (Some(nested), None) => nested
                .iter()
                .enumerate()
                .map(|(i, rows)| nested_to_matrix(rows, &format!("system.b[{i}]")))
                .collect::<Result<_>>()?,
            (None, Some(files)) => files
                .iter()
                .map(|rel| parse_matrix_csv(&base.join(rel)))
                .collect::<Result<_>>()?,
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "system: give inline b or b_files, not both".into(),
                ))
            }
            (None, None) => return Err(Error::Config("system: missing control matrices".into())),
        };
        let system = LdsSystem::new(a.clone(), b_list, spec.w_bound)?;
        if let Some(x0_vec) = &spec.x0 {
            if x0_vec.len() != d {
                return Err(Error::Config(format!(
                    "x0 has dimension {}, system has {d}",
                    x0_vec.len()
                )));
            }
            x0 = Some(DVector::from_column_slice(x0_vec));
        }
        // Inline everything back so the manifest needs no files.
        spec.a = Some(matrix_to_nested(&a));
        spec.a_file = None;
        spec.b = Some((0..system.n_agents()).map(|i| matrix_to_nested(system.b(i))).collect());
        spec.b_files = None;

        let n = system.n_agents();
        if config.agents.is_empty() {
            return Err(Error::Config(format!(
                "config needs one [[agents]] entry per control channel ({n})"
            )));
        }
        if config.agents.len() != n {
            return Err(Error::Config(format!(
                "{} [[agents]] entries for {n} control channels",
                config.agents.len()
            )));
        }

        for (i, agent) in config.agents.iter_mut().enumerate() {
            let k = match (&agent.k, &agent.k_file) {
                (None, None) => synthesize(&a, system.b(i))?,
                (inline, file) => load_matrix_field(inline, file, base, &format!("agents[{i}].k"))?,
            };
            let k_i = system.b(i).ncols();
            if k.nrows() != k_i || k.ncols() != d {
                return Err(Error::Config(format!(
                    "agents[{i}].k must be {k_i}x{d}, got {}x{}",
                    k.nrows(),
                    k.ncols()
                )));
            }
            agent.k = Some(matrix_to_nested(&k));
            agent.k_file = None;
            ks.push(k);

            let idx = agent.setting.or(config.setting).unwrap_or(2);
            agent.setting = Some(idx);
            settings.push(InfoSetting::from_index(idx)?);
        }

        let cert = certify_global(&a, system.b_all(), &ks)?;
        for (i, agent) in config.agents.iter().enumerate() {
            // Setting-1 agents run on their own channel's certificate, the
            // rest on the joint one; overrides may only loosen.
            let base_cert = match settings[i] {
                InfoSetting::OwnResidual => certify(&a, system.b(i), &ks[i])?,
                InfoSetting::SharedDisturbance => cert.clone(),
            };
            let loosened = base_cert.with_overrides(agent.kappa, agent.gamma)?;
            agent_bounds.push((loosened.kappa, loosened.gamma));
        }
        global_cert = Some(cert);
        sys = Some(system);
    } else if !config.agents.is_empty() {
        return Err(Error::Config(
            "[[agents]] entries need a [system] section".into(),
        ));
    }

    // Early validation of sections that would otherwise fail mid-run.
    if let Some(kind) = &config.disturbance {
        let sys_ref = sys
            .as_ref()
            .ok_or_else(|| Error::Config("[disturbance] needs a [system] section".into()))?;
        DisturbanceGenerator::new(kind.clone(), sys_ref.dim(), sys_ref.w_bound(), 0)?;
    }
    if let Some(cost) = &config.cost {
        if let CostSpec::QuadraticTracking { .. } = cost {
            let sys_ref = sys
                .as_ref()
                .ok_or_else(|| Error::Config("a tracking [cost] needs a [system] section".into()))?;
            let dims = sys_ref.control_dims();
            if dims.iter().any(|&k| k != dims[0]) {
                return Err(Error::Config(
                    "quadratic tracking requires equal control dimensions across agents".into(),
                ));
            }
            let (a_kind, b_kind, _) = tracking_paths(cost)?;
            if kind_dim(&a_kind, sys_ref.dim()) != sys_ref.dim() {
                return Err(Error::Config(format!(
                    "state target has dimension {}, system has {}",
                    kind_dim(&a_kind, sys_ref.dim()),
                    sys_ref.dim()
                )));
            }
            if kind_dim(&b_kind, dims[0]) != dims[0] {
                return Err(Error::Config(format!(
                    "control target has dimension {}, agents have {}",
                    kind_dim(&b_kind, dims[0]),
                    dims[0]
                )));
            }
            DisturbanceGenerator::new(a_kind.clone(), sys_ref.dim(), kind_sup(&a_kind), 0)?;
            DisturbanceGenerator::new(b_kind.clone(), dims[0], kind_sup(&b_kind), 0)?;
        }
    }
    if let Some(eq) = &config.eqgap {
        if eq.stride == Some(0) {
            return Err(Error::Config("eqgap stride must be >= 1".into()));
        }
        if let Some(eta) = eq.eta {
            if !(eta > 0.0) {
                return Err(Error::Config(format!("eqgap eta must be positive, got {eta}")));
            }
        }
    }
    if let Some([lo, hi]) = config.check.ratio_band {
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Config(format!(
                "ratio band must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
    }

    // Per-horizon hyperparameters.
    let mut cells = Vec::with_capacity(config.t_grid.len());
    for &t in &config.t_grid {
        let mut hs = Vec::with_capacity(config.agents.len());
        let mut etas = Vec::with_capacity(config.agents.len());
        for (i, agent) in config.agents.iter().enumerate() {
            let rule = match agent.tuning {
                Some(rule) => rule,
                None if agent.h.is_some() => TuningRule::Manual,
                None => {
                    return Err(Error::Config(format!(
                        "agents[{i}]: give a tuning rule or an explicit h"
                    )))
                }
            };
            let (kappa_i, gamma_i) = agent_bounds[i];
            let sys_ref = sys.as_ref().expect("agents imply a system");
            let n = sys_ref.n_agents();
            let (h, eta) = match rule {
                TuningRule::Manual => {
                    let h = agent.h.ok_or_else(|| {
                        Error::Config(format!("agents[{i}]: manual tuning needs h"))
                    })?;
                    if h == 0 {
                        return Err(Error::Config(format!("agents[{i}]: h must be >= 1")));
                    }
                    if let Some(eta) = agent.eta {
                        if !(eta > 0.0) {
                            return Err(Error::Config(format!(
                                "agents[{i}]: eta must be positive, got {eta}"
                            )));
                        }
                    }
                    (h, agent.eta)
                }
                TuningRule::Thm31 => {
                    let max_b = (0..n)
                        .map(|j| spectral_norm(sys_ref.b(j)))
                        .fold(0.0, f64::max);
                    let h = ((kappa_i * t as f64).ln() / gamma_i).ceil().max(1.0) as usize;
                    let w_eff =
                        sys_ref.w_bound() + (n as f64 - 1.0) * config.u_bound * max_b;
                    let ctx = BoundContext::new(
                        kappa_i,
                        gamma_i,
                        2.0 * kappa_i * kappa_i,
                        w_eff,
                        h,
                        spectral_norm(sys_ref.b(i)),
                        spectral_norm(sys_ref.b(i)),
                        sys_ref.dim(),
                    );
                    let cost = config.cost.as_ref().ok_or_else(|| {
                        Error::Config("thm31 tuning needs a [cost] section".into())
                    })?;
                    let g = cost_grad_bound(
                        cost,
                        sys_ref.dim(),
                        sys_ref.b(i).ncols(),
                        ctx.uniform_d(),
                    )?;
                    let (h, eta) = tune_setting1(&TuneSetting1 {
                        g,
                        w: sys_ref.w_bound(),
                        n,
                        u: config.u_bound,
                        max_b,
                        kappa_i,
                        gamma_i,
                        t,
                        c_eta: 1.0,
                    })?;
                    (h, Some(eta))
                }
                TuningRule::Thm33 => {
                    let (h, eta) = tune_setting2(&TuneSetting2 {
                        n,
                        kappa_bar: kappa_i,
                        gamma_bar: gamma_i,
                        t,
                        c_eta: 1.0,
                    })?;
                    (h, Some(eta))
                }
                TuningRule::Thm34 => {
                    let (h, eta) = tune_setting2_lipschitz(&TuneSetting2 {
                        n,
                        kappa_bar: kappa_i,
                        gamma_bar: gamma_i,
                        t,
                        c_eta: 1.0,
                    })?;
                    (h, Some(eta))
                }
            };
            hs.push(h);
            etas.push(eta);
        }
        cells.push(CellPlan { t, h: hs, eta: etas });
    }

    Ok(Resolved {
        config,
        sys,
        x0,
        ks,
        settings,
        global_cert,
        agent_bounds,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertOut {
    pub scope: String,
    pub kappa: f64,
    pub gamma: f64,
    pub k_norm: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellOut {
    pub t: usize,
    #[serde(default)]
    pub h: Vec<usize>,
    /// Resolved step sizes; `nan` marks run-time self-tuning.
    #[serde(default)]
    pub eta: Vec<f64>,
}

/// Self-contained run record: resolved config plus provenance. Loading a
/// manifest as `--config` reruns it exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub library_version: String,
    pub command: String,
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub certificates: Vec<CertOut>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<CellOut>,
    pub config: ExperimentConfig,
}

fn build_manifest(res: &Resolved, command: &str, incomplete: bool) -> Manifest {
    let mut certificates = Vec::new();
    if let Some(cert) = &res.global_cert {
        certificates.push(CertOut {
            scope: "global".into(),
            kappa: cert.kappa,
            gamma: cert.gamma,
            k_norm: spectral_norm(&cert.k),
            residual: cert.residual,
        });
    }
    for (i, &(kappa, gamma)) in res.agent_bounds.iter().enumerate() {
        certificates.push(CertOut {
            scope: format!("agent-{i}"),
            kappa,
            gamma,
            k_norm: spectral_norm(&res.ks[i]),
            residual: 0.0,
        });
    }
    let cells = res
        .cells
        .iter()
        .map(|c| CellOut {
            t: c.t,
            h: c.h.clone(),
            eta: c.eta.iter().map(|e| e.unwrap_or(f64::NAN)).collect(),
        })
        .collect();
    Manifest {
        schema: MANIFEST_SCHEMA.into(),
        library_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        incomplete,
        certificates,
        cells,
        config: res.config.clone(),
    }
}

fn write_manifest(res: &Resolved, out: &Path, command: &str, incomplete: bool) -> Result<()> {
    let manifest = build_manifest(res, command, incomplete);
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::ConfigParse(format!("manifest serialization: {e}")))?;
    std::fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cell orchestration
// ---------------------------------------------------------------------------

/// Artifact bundle plus check results of one subcommand run.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    /// Human-readable check lines (`PASS`/`FAIL` prefixed).
    pub check_lines: Vec<String>,
    /// Failed checks only; nonempty means exit code 4 under `--check`.
    pub check_failures: Vec<String>,
    /// Post-hoc audit notes (control-bound violations and the like).
    pub warnings: Vec<String>,
}

impl RunOutcome {
    fn pass(&mut self, line: String) {
        self.check_lines.push(format!("PASS {line}"));
    }

    fn fail(&mut self, line: String) {
        self.check_lines.push(format!("FAIL {line}"));
        self.check_failures.push(line);
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {jobs}-thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn ensure_out_dir(res: &Resolved) -> Result<PathBuf> {
    let out = PathBuf::from(&res.config.out_dir);
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

/// All (cell index, trial) pairs in deterministic order.
fn cell_jobs(res: &Resolved) -> Vec<(usize, usize)> {
    let trials = res.config.trials;
    (0..res.cells.len())
        .flat_map(|c| (0..trials).map(move |j| (c, j)))
        .collect()
}

fn require_concrete_etas(res: &Resolved) -> Result<()> {
    for cell in &res.cells {
        for (i, eta) in cell.eta.iter().enumerate() {
            if eta.is_none() {
                return Err(Error::Config(format!(
                    "agents[{i}]: this subcommand needs a concrete step size; \
                     give eta or a tuning rule"
                )));
            }
        }
    }
    Ok(())
}

fn simulate_cell(res: &Resolved, cell: &CellPlan, trial: usize) -> Result<Trace> {
    let sys = res.sys.as_ref().expect("validated at entry");
    let gen = build_generator(res, cell.t, trial)?;
    let cost = build_agent_cost(res, cell.t, trial)?;
    let mut agents: Vec<Box<dyn Agent>> = Vec::with_capacity(res.ks.len());
    for (i, k) in res.ks.iter().enumerate() {
        let (kappa, gamma) = res.agent_bounds[i];
        let eta = cell.eta[i].expect("validated at entry");
        let cfg = AgentConfig::new(i, k.clone(), kappa, gamma, cell.h[i], eta)
            .with_setting(res.settings[i]);
        agents.push(Box::new(GpcAgent::new(cfg, sys, cost.clone())?));
    }
    let mut opts = SimOptions::rounds(cell.t);
    if let Some(x0) = &res.x0 {
        opts = opts.with_x0(x0.clone());
    }
    simulate(sys, &mut agents, &gen, cost.as_ref(), &opts)
}

fn validate_sim_entry(res: &Resolved) -> Result<()> {
    if res.sys.is_none() {
        return Err(Error::Config("this run needs a [system] section".into()));
    }
    if res.config.disturbance.is_none() {
        return Err(Error::Config("this run needs a [disturbance] section".into()));
    }
    if res.config.cost.is_none() {
        return Err(Error::Config("this run needs a [cost] section".into()));
    }
    require_concrete_etas(res)
}

/// Per-agent realized summary of one trace.
struct TraceStats {
    total_cost: f64,
    max_u: f64,
}

fn trace_stats(trace: &Trace, i: usize) -> TraceStats {
    let total_cost = trace.costs_of(i).iter().sum();
    let max_u = (0..trace.rounds())
        .map(|t| trace.row(t, i).u.norm())
        .fold(0.0, f64::max);
    TraceStats { total_cost, max_u }
}

fn audit_controls(res: &Resolved, stats: &BTreeMap<(usize, usize, usize), TraceStats>) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut worst: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(_, _, agent), s) in stats {
        let entry = worst.entry(agent).or_insert(0.0);
        *entry = entry.max(s.max_u);
    }
    for (agent, max_u) in worst {
        if max_u > res.config.u_bound {
            warnings.push(format!(
                "agent {agent} exceeded the assumed control bound U = {} (max ||u|| = {:.6e})",
                res.config.u_bound, max_u
            ));
        }
    }
    warnings
}

// ---------------------------------------------------------------------------
// Subcommand: simulate
// ---------------------------------------------------------------------------

pub fn run_simulate(res: &Resolved, jobs: usize) -> Result<RunOutcome> {
    validate_sim_entry(res)?;
    let out = ensure_out_dir(res)?;
    write_manifest(res, &out, "simulate", true)?;

    let jobs_list = cell_jobs(res);
    let results: Vec<Result<Trace>> = with_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(c, trial)| {
                let trace = simulate_cell(res, &res.cells[c], trial)?;
                trace.to_csv(out.join(format!("trace_T{}_trial{}.csv", res.cells[c].t, trial)))?;
                Ok(trace)
            })
            .collect()
    })?;

    let mut stats: BTreeMap<(usize, usize, usize), TraceStats> = BTreeMap::new();
    let mut max_state: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(c, trial), result) in jobs_list.iter().zip(results) {
        let trace = result?;
        let t = res.cells[c].t;
        let max_x = trace.states.iter().map(DVector::norm).fold(0.0, f64::max);
        max_state.insert((t, trial), max_x);
        for i in 0..trace.n_agents() {
            stats.insert((t, trial, i), trace_stats(&trace, i));
        }
    }

    let mut summary = String::from(
        "T,trial,agent,total_cost,mean_cost,max_state_norm,max_control_norm,u_within_bound\n",
    );
    for (&(t, trial, i), s) in &stats {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t,
            trial,
            i,
            fmt_f64(s.total_cost),
            fmt_f64(s.total_cost / t as f64),
            fmt_f64(max_state[&(t, trial)]),
            fmt_f64(s.max_u),
            u8::from(s.max_u <= res.config.u_bound),
        ));
    }
    write_text(&out.join("simulate_summary.csv"), &summary)?;

    let mut outcome = RunOutcome {
        warnings: audit_controls(res, &stats),
        ..RunOutcome::default()
    };
    if res.config.check.is_empty() {
        outcome
            .check_lines
            .push("PASS simulate: no thresholds configured".into());
    }
    write_manifest(res, &out, "simulate", false)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Subcommand: regret
// ---------------------------------------------------------------------------

struct RegretCell {
    trace: Trace,
    /// Per agent: (full-horizon regret, post-burn-in regret).
    per_agent: Vec<(f64, f64)>,
    rows: Vec<String>,
}

fn regret_cell(res: &Resolved, cell: &CellPlan, trial: usize) -> Result<RegretCell> {
    let sys = res.sys.as_ref().expect("validated at entry");
    let trace = simulate_cell(res, cell, trial)?;
    let cost = build_agent_cost(res, cell.t, trial)?;
    let solver_spec = res.config.solver.clone().unwrap_or_default();
    let mut per_agent = Vec::with_capacity(res.ks.len());
    let mut rows = Vec::with_capacity(res.ks.len());
    for (i, k) in res.ks.iter().enumerate() {
        let (kappa, gamma) = res.agent_bounds[i];
        let h = cell.h[i];
        let set = DacSet::with_tau(
            2.0 * kappa * kappa,
            kappa,
            gamma,
            h,
            sys.b(i).ncols(),
            sys.dim(),
        )?;
        let solver =
            solver_spec.to_options(subseed(res.config.seed, &[0xb0, cell.t as u64, trial as u64]));
        let sol = best_dac(
            &trace,
            sys,
            i,
            k,
            &set,
            res.settings[i],
            cost.as_ref(),
            &solver,
            h,
        )?;
        let report = regret(&trace, i, &sol.costs, h, "dac", ComparatorArg::Dac(sol.m))?;
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            cell.t,
            trial,
            i,
            report.comparator,
            report.h_start,
            fmt_f64(report.realized),
            fmt_f64(report.comparator_cost),
            fmt_f64(report.regret),
            fmt_f64(report.realized_tail),
            fmt_f64(report.comparator_tail),
            fmt_f64(report.regret_tail),
        ));
        per_agent.push((report.regret, report.regret_tail));
    }
    Ok(RegretCell {
        trace,
        per_agent,
        rows,
    })
}

/// Build a regret curve from precomputed per-cell values (reuses the curve
/// aggregation and slope fit without re-simulating).
fn curve_from_values(
    t_grid: &[usize],
    trials: usize,
    values: &BTreeMap<(usize, usize), f64>,
) -> Result<RegretCurve> {
    regret_curve(t_grid, trials, &|t, trial| Ok(values[&(t, trial)]))
}

pub fn run_regret(res: &Resolved, jobs: usize) -> Result<RunOutcome> {
    // Lower-bound scenarios ship closed-form comparators; delegate.
    if res.config.lower_bound.is_some() {
        return run_lower_bound(res, jobs);
    }
    validate_sim_entry(res)?;
    let out = ensure_out_dir(res)?;
    write_manifest(res, &out, "regret", true)?;

    let jobs_list = cell_jobs(res);
    let results: Vec<Result<RegretCell>> = with_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(c, trial)| {
                let cell = regret_cell(res, &res.cells[c], trial)?;
                cell.trace
                    .to_csv(out.join(format!("trace_T{}_trial{}.csv", res.cells[c].t, trial)))?;
                Ok(cell)
            })
            .collect()
    })?;

    let n_agents = res.ks.len();
    let mut full: Vec<BTreeMap<(usize, usize), f64>> = vec![BTreeMap::new(); n_agents];
    let mut tail: Vec<BTreeMap<(usize, usize), f64>> = vec![BTreeMap::new(); n_agents];
    let mut table =
        String::from("T,trial,agent,comparator,h_start,realized,comparator_cost,regret,realized_tail,comparator_tail,regret_tail\n");
    let mut stats: BTreeMap<(usize, usize, usize), TraceStats> = BTreeMap::new();
    for (&(c, trial), result) in jobs_list.iter().zip(results) {
        let cell = result?;
        let t = res.cells[c].t;
        for (i, &(r_full, r_tail)) in cell.per_agent.iter().enumerate() {
            full[i].insert((t, trial), r_full);
            tail[i].insert((t, trial), r_tail);
            stats.insert((t, trial, i), trace_stats(&cell.trace, i));
        }
        for row in &cell.rows {
            table.push_str(row);
            table.push('\n');
        }
    }
    write_text(&out.join("regret.csv"), &table)?;

    let mut slopes = String::from("agent,slope_full,slope_tail\n");
    let mut slope_pairs: Vec<(Option<f64>, Option<f64>)> = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let full_curve = curve_from_values(&res.config.t_grid, res.config.trials, &full[i])?;
        let tail_curve = curve_from_values(&res.config.t_grid, res.config.trials, &tail[i])?;
        write_text(
            &out.join(format!("curve_agent{i}.csv")),
            &full_curve.to_csv(),
        )?;
        write_text(
            &out.join(format!("curve_tail_agent{i}.csv")),
            &tail_curve.to_csv(),
        )?;
        slopes.push_str(&format!(
            "{},{},{}\n",
            i,
            full_curve.slope.map(fmt_f64).unwrap_or_default(),
            tail_curve.slope.map(fmt_f64).unwrap_or_default(),
        ));
        slope_pairs.push((full_curve.slope, tail_curve.slope));
    }
    write_text(&out.join("slopes.csv"), &slopes)?;

    let mut outcome = RunOutcome {
        warnings: audit_controls(res, &stats),
        ..RunOutcome::default()
    };
    if let Some(cap) = res.config.check.max_slope {
        for (i, (slope_full, slope_tail)) in slope_pairs.iter().enumerate() {
            for (label, slope) in [("full", slope_full), ("tail", slope_tail)] {
                match slope {
                    Some(s) if *s <= cap => outcome.pass(format!(
                        "agent {i} {label} regret slope {s:.4} <= {cap}"
                    )),
                    Some(s) => outcome.fail(format!(
                        "agent {i} {label} regret slope {s:.4} exceeds {cap}"
                    )),
                    None => outcome.fail(format!(
                        "agent {i} {label} regret slope unavailable (fewer than 3 positive-mean horizons)"
                    )),
                }
            }
        }
    }
    write_manifest(res, &out, "regret", false)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Subcommand: lower-bound
// ---------------------------------------------------------------------------

fn check_lower_bound(res: &Resolved, report: &LowerBoundReport, outcome: &mut RunOutcome) {
    let check = &res.config.check;
    if let Some([lo, hi]) = check.ratio_band {
        for p in &report.points {
            if p.ratio >= lo && p.ratio <= hi {
                outcome.pass(format!(
                    "T = {}: regret/sqrt(T) = {:.4} in [{lo}, {hi}]",
                    p.t, p.ratio
                ));
            } else {
                outcome.fail(format!(
                    "T = {}: regret/sqrt(T) = {:.4} outside [{lo}, {hi}]",
                    p.t, p.ratio
                ));
            }
        }
    }
    if let Some(cap) = check.max_ratio_spread {
        let spread = report.ratio_spread();
        if spread <= cap {
            outcome.pass(format!("ratio spread {spread:.4} <= {cap}"));
        } else {
            outcome.fail(format!("ratio spread {spread:.4} exceeds {cap}"));
        }
    }
    if let Some([target, tol]) = check.cost_per_round {
        for p in &report.points {
            let err = (p.mean_cost_per_round - target).abs();
            if err <= tol {
                outcome.pass(format!(
                    "T = {}: mean cost/round {:.6} within {target} +- {tol}",
                    p.t, p.mean_cost_per_round
                ));
            } else {
                outcome.fail(format!(
                    "T = {}: mean cost/round {:.6} outside {target} +- {tol}",
                    p.t, p.mean_cost_per_round
                ));
            }
        }
    }
}

pub fn run_lower_bound(res: &Resolved, jobs: usize) -> Result<RunOutcome> {
    let spec = res
        .config
        .lower_bound
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs a [lower_bound] section".into()))?;
    let out = ensure_out_dir(res)?;
    write_manifest(res, &out, "lower-bound", true)?;
    let report = with_pool(jobs, || {
        lower_bound_experiment(
            spec.kind.to_library(),
            &res.config.t_grid,
            res.config.trials,
            res.config.seed,
        )
    })??;
    write_text(&out.join("lower_bound.csv"), &report.to_csv())?;

    let mut outcome = RunOutcome::default();
    for p in &report.points {
        outcome.warnings.push(format!(
            "T = {}: mean regret {:.4} (stderr {:.4}), regret/sqrt(T) = {:.4}, cost/round {:.6}",
            p.t, p.mean_regret, p.stderr, p.ratio, p.mean_cost_per_round
        ));
    }
    check_lower_bound(res, &report, &mut outcome);
    write_manifest(res, &out, "lower-bound", false)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Subcommand: eqgap
// ---------------------------------------------------------------------------

pub fn run_eqgap(res: &Resolved, jobs: usize) -> Result<RunOutcome> {
    let sys = res
        .sys
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs a [system] section".into()))?;
    if res.config.disturbance.is_none() {
        return Err(Error::Config("this run needs a [disturbance] section".into()));
    }
    if res.config.cost.is_none() {
        return Err(Error::Config("this run needs a [cost] section".into()));
    }
    for cell in &res.cells {
        if cell.h.iter().any(|&h| h != cell.h[0]) {
            return Err(Error::Config(
                "equilibrium tracking needs one common memory H across agents; \
                 give every agent the same tuning"
                    .into(),
            ));
        }
    }
    let spec = res.config.eqgap.clone().unwrap_or_default();
    let out = ensure_out_dir(res)?;
    write_manifest(res, &out, "eqgap", true)?;

    let jobs_list = cell_jobs(res);
    let results: Vec<Result<crate::equilibrium::EqGapReport>> = with_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(c, trial)| {
                let cell = &res.cells[c];
                let gen = build_generator(res, cell.t, trial)?;
                let cost = build_joint_cost(res, cell.t, trial)?;
                let mut cfg = EqGapConfig::new(cell.t, cell.h[0]).with_seed(subseed(
                    res.config.seed,
                    &[TAG_EQGAP, cell.t as u64, trial as u64],
                ));
                if let Some(eta) = spec.eta {
                    cfg = cfg.with_eta(eta);
                }
                if let Some(stride) = spec.stride {
                    cfg = cfg.with_stride(stride);
                }
                if let Some(samples) = spec.smoothness_samples {
                    cfg.smoothness_samples = samples;
                }
                if let Some(x0) = &res.x0 {
                    cfg = cfg.with_x0(x0.clone());
                }
                let report = eqgap_run(sys, &res.ks, cost.as_ref(), &gen, &cfg)?;
                write_text(
                    &out.join(format!("eqgap_T{}_trial{}.csv", cell.t, trial)),
                    &report.to_csv(),
                )?;
                Ok(report)
            })
            .collect()
    })?;

    let mut summary = String::from(
        "T,trial,h,eta,smoothness,c_m,initial_gap,final_avg_eqgap_sq,last_eqgap,br_converged,path_check,chain_check\n",
    );
    let mut outcome = RunOutcome::default();
    for (&(c, trial), result) in jobs_list.iter().zip(results) {
        let report = result?;
        let t = res.cells[c].t;
        let path_ok = path_length_check(&report, 1e-8);
        let chain_ok = eqgap_chain_check(&report, 1e-8);
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            t,
            trial,
            report.h,
            fmt_f64(report.eta),
            fmt_f64(report.smoothness),
            fmt_f64(report.c_m),
            fmt_f64(report.initial_gap),
            fmt_f64(report.avg_eqgap_sq_final()),
            fmt_f64(report.eqgap.last().copied().unwrap_or(0.0)),
            u8::from(report.br_converged),
            u8::from(path_ok),
            u8::from(chain_ok),
        ));
        if !path_ok {
            outcome
                .warnings
                .push(format!("T = {t} trial {trial}: path-length inequality violated"));
        }
        if !chain_ok {
            outcome
                .warnings
                .push(format!("T = {t} trial {trial}: gap chain inequality violated"));
        }
        if let Some(cap) = res.config.check.max_final_avg_eqgap_sq {
            let v = report.avg_eqgap_sq_final();
            if v <= cap {
                outcome.pass(format!(
                    "T = {t} trial {trial}: avg EQGAP^2 = {v:.6e} <= {cap:.6e}"
                ));
            } else {
                outcome.fail(format!(
                    "T = {t} trial {trial}: avg EQGAP^2 = {v:.6e} exceeds {cap:.6e}"
                ));
            }
        }
    }
    write_text(&out.join("eqgap_summary.csv"), &summary)?;
    write_manifest(res, &out, "eqgap", false)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Subcommand: certify / tune
// ---------------------------------------------------------------------------

fn certificate_lines(scope: &str, cert: &StabilityCertificate) -> String {
    format!(
        "scope = {scope}\nkappa = {}\ngamma = {}\nk_norm = {}\nresidual = {}\n",
        fmt_f64(cert.kappa),
        fmt_f64(cert.gamma),
        fmt_f64(spectral_norm(&cert.k)),
        fmt_f64(cert.residual),
    )
}

/// Certify a closed-loop matrix given as a CSV file (treated as autonomous:
/// zero input matrix and gain).
pub fn certify_matrix_file(path: &Path) -> Result<String> {
    let a = parse_matrix_csv(path)?;
    if a.nrows() != a.ncols() {
        return Err(Error::Config(format!(
            "closed-loop matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let d = a.nrows();
    let cert = certify(&a, &DMatrix::zeros(d, 1), &DMatrix::zeros(1, d))?;
    Ok(certificate_lines(&path.display().to_string(), &cert))
}

/// Certificates of a resolved config: global plus each agent's channel.
pub fn certify_config(res: &Resolved) -> Result<String> {
    let sys = res
        .sys
        .as_ref()
        .ok_or_else(|| Error::Config("certify needs a [system] section".into()))?;
    let mut text = String::new();
    if let Some(cert) = &res.global_cert {
        text.push_str(&certificate_lines("global", cert));
    }
    for (i, k) in res.ks.iter().enumerate() {
        let cert = certify(sys.a(), sys.b(i), k)?;
        text.push('\n');
        text.push_str(&certificate_lines(&format!("agent-{i}"), &cert));
    }
    Ok(text)
}

/// Human-readable (H, eta) table of the resolved plan.
pub fn tune_table(res: &Resolved) -> String {
    let mut text = String::new();
    for cell in &res.cells {
        for (i, (&h, eta)) in cell.h.iter().zip(&cell.eta).enumerate() {
            let rule = res.config.agents[i]
                .tuning
                .map_or("manual", TuningRule::name);
            let eta_text = eta
                .map(fmt_f64)
                .unwrap_or_else(|| "self-tuned (1/L at run time)".into());
            text.push_str(&format!(
                "T = {}  agent = {i}  rule = {rule}  H = {h}  eta = {eta_text}\n",
                cell.t
            ));
        }
    }
    text
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

/// Exit code contract: 2 for configuration problems, 3 for numeric failures.
pub fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigParse(_) | Error::Dimension { .. } => 2,
        _ => 3,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "magpc",
    version,
    about = "Multi-agent online control: simulation, regret, and equilibrium-gap experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Roll the configured learners forward and record traces.
    Simulate(RunArgs),
    /// Simulate, then score each agent against its best DAC comparator.
    Regret(RunArgs),
    /// Randomized-instance lower-bound experiment with closed-form comparators.
    LowerBound(RunArgs),
    /// Common-interest tracking run with best-response gap evaluation.
    Eqgap(RunArgs),
    /// Print strong-stability certificates.
    Certify(CertifyArgs),
    /// Print the theorem-rule (H, eta) for the configured constants.
    Tune(RunArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Experiment config (TOML); a previously emitted manifest also works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Horizon grid override, comma separated.
    #[arg(long = "T", value_delimiter = ',')]
    pub t: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for (T, trial) cells; 0 = library default.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory override.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Information setting override for every agent (1 or 2).
    #[arg(long)]
    pub setting: Option<u8>,
    /// Tuning rule override for every agent.
    #[arg(long, value_enum)]
    pub tuning: Option<TuningRule>,
    /// Evaluate the config's acceptance thresholds; failures exit with 4.
    #[arg(long)]
    pub check: bool,
}

#[derive(Args, Debug, Default)]
pub struct CertifyArgs {
    /// Closed-loop matrix as CSV (certified as-is).
    #[arg(long)]
    pub matrix_file: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

fn load_from_args(
    config: &Option<PathBuf>,
    preset_name: &Option<String>,
) -> Result<(ExperimentConfig, PathBuf)> {
    match (config, preset_name) {
        (Some(path), None) => {
            let cfg = load_config(path)?;
            let base = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            Ok((cfg, base))
        }
        (None, Some(name)) => Ok((preset(name)?, PathBuf::from("."))),
        (Some(_), Some(_)) => Err(Error::Config(
            "give --config or --preset, not both".into(),
        )),
        (None, None) => Err(Error::Config("give --config or --preset".into())),
    }
}

fn resolve_run_args(args: &RunArgs) -> Result<Resolved> {
    let (mut cfg, base) = load_from_args(&args.config, &args.preset)?;
    let overrides = Overrides {
        t_grid: args.t.clone(),
        trials: args.trials,
        seed: args.seed,
        out_dir: args.out.as_ref().map(|p| p.display().to_string()),
        setting: args.setting,
        tuning: args.tuning,
    };
    apply_overrides(&mut cfg, &overrides)?;
    resolve(&cfg, &base)
}

fn report_outcome(outcome: &RunOutcome, check: bool) -> Vec<String> {
    for w in &outcome.warnings {
        println!("note: {w}");
    }
    if check {
        for line in &outcome.check_lines {
            println!("CHECK {line}");
        }
        outcome.check_failures.clone()
    } else {
        Vec::new()
    }
}

/// Dispatch a parsed command line; returns the list of failed checks.
pub fn run_cli(cli: Cli) -> Result<Vec<String>> {
    match cli.cmd {
        Cmd::Simulate(args) => {
            let res = resolve_run_args(&args)?;
            let outcome = run_simulate(&res, args.jobs)?;
            Ok(report_outcome(&outcome, args.check))
        }
        Cmd::Regret(args) => {
            let res = resolve_run_args(&args)?;
            let outcome = run_regret(&res, args.jobs)?;
            Ok(report_outcome(&outcome, args.check))
        }
        Cmd::LowerBound(args) => {
            let res = resolve_run_args(&args)?;
            let outcome = run_lower_bound(&res, args.jobs)?;
            Ok(report_outcome(&outcome, args.check))
        }
        Cmd::Eqgap(args) => {
            let res = resolve_run_args(&args)?;
            let outcome = run_eqgap(&res, args.jobs)?;
            Ok(report_outcome(&outcome, args.check))
        }
        Cmd::Certify(args) => {
            if let Some(path) = &args.matrix_file {
                if args.config.is_some() || args.preset.is_some() {
                    return Err(Error::Config(
                        "give --matrix-file or a config source, not both".into(),
                    ));
                }
                print!("{}", certify_matrix_file(path)?);
            } else {
                let (cfg, base) = load_from_args(&args.config, &args.preset)?;
                let res = resolve(&cfg, &base)?;
                print!("{}", certify_config(&res)?);
            }
            Ok(Vec::new())
        }
        Cmd::Tune(args) => {
            let res = resolve_run_args(&args)?;
            print!("{}", tune_table(&res));
            Ok(Vec::new())
        }
    }
}

/// Binary entry point; maps outcomes to the exit-code contract
/// (0 ok, 2 config, 3 numeric, 4 failed checks).
pub fn cli_main() -> u8 {
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(failures) if failures.is_empty() => 0,
        Ok(failures) => {
            eprintln!("{} check(s) failed", failures.len());
            4
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn duopoly_small(out: &Path) -> ExperimentConfig {
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.t_grid = vec![24];
        cfg.trials = 2;
        cfg.out_dir = out.display().to_string();
        cfg
    }

    #[test]
    fn every_preset_parses_and_resolves() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            let res = resolve(&cfg, Path::new(".")).unwrap();
            assert_eq!(res.cells.len(), cfg.t_grid.len(), "{name}");
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        match preset("no-such-scenario") {
            Err(Error::Config(msg)) => assert!(msg.contains("unknown preset")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = preset("grid-toy").unwrap();
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let text = toml::to_string_pretty(&res.config).unwrap();
        let back = parse_config_str(&text).unwrap();
        let res2 = resolve(&back, Path::new(".")).unwrap();
        assert_eq!(res.cells.len(), res2.cells.len());
        for (a, b) in res.cells.iter().zip(&res2.cells) {
            assert_eq!(a.h, b.h);
            assert_eq!(a.eta, b.eta);
        }
        for (ka, kb) in res.ks.iter().zip(&res2.ks) {
            assert_eq!(ka, kb);
        }
    }

    #[test]
    fn typo_in_config_is_rejected() {
        let err = parse_config_str(
            r#"
            name = "x"
            seed = 1
            t = 10
            trails = 5
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConfigParse(_)), "{err}");
    }

    #[test]
    fn invalid_configs_fail_at_resolution() {
        // Wrong x0 dimension.
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.system.as_mut().unwrap().x0 = Some(vec![0.0, 0.0]);
        assert!(resolve(&cfg, Path::new(".")).is_err());

        // Wrong gain shape.
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.agents[0].k = Some(vec![vec![0.2, 0.1]]);
        assert!(resolve(&cfg, Path::new(".")).is_err());

        // Agent count mismatch.
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.agents.pop();
        assert!(resolve(&cfg, Path::new(".")).is_err());

        // Certificate overrides may only loosen.
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.agents[0].kappa = Some(0.5);
        assert!(resolve(&cfg, Path::new(".")).is_err());

        // Destabilizing gain.
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.agents[0].k = Some(vec![vec![-2.0]]);
        cfg.agents[1].k = Some(vec![vec![0.0]]);
        assert!(resolve(&cfg, Path::new(".")).is_err());
    }

    #[test]
    fn matrix_files_are_inlined_at_resolution() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "# comment\n0.5\n").unwrap();
        std::fs::write(dir.path().join("k0.csv"), "0.2\n").unwrap();
        let mut cfg = preset("scalar-duopoly").unwrap();
        let sys = cfg.system.as_mut().unwrap();
        sys.a = None;
        sys.a_file = Some("a.csv".into());
        cfg.agents[0].k = None;
        cfg.agents[0].k_file = Some("k0.csv".into());
        let res = resolve(&cfg, dir.path()).unwrap();
        assert_eq!(res.sys.as_ref().unwrap().a()[(0, 0)], 0.5);
        assert_eq!(res.ks[0][(0, 0)], 0.2);
        // The normalized config no longer references any file.
        let spec = res.config.system.as_ref().unwrap();
        assert!(spec.a_file.is_none() && spec.a.is_some());
        assert!(res.config.agents[0].k_file.is_none());
    }

    #[test]
    fn ragged_matrix_csv_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(parse_matrix_csv(&path).is_err());
    }

    #[test]
    fn missing_gain_is_synthesized_and_certified() {
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.agents[0].k = None;
        cfg.agents[1].k = None;
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let cert = res.global_cert.as_ref().unwrap();
        assert!(cert.gamma > 0.0 && cert.kappa >= 1.0);
    }

    #[test]
    fn overrides_rewrite_grid_seed_and_settings() {
        let mut cfg = preset("scalar-duopoly").unwrap();
        let ov = Overrides {
            t_grid: Some(vec![64, 128]),
            trials: Some(7),
            seed: Some(99),
            out_dir: Some("elsewhere".into()),
            setting: Some(1),
            tuning: Some(TuningRule::Thm34),
        };
        apply_overrides(&mut cfg, &ov).unwrap();
        assert_eq!(cfg.t_grid, vec![64, 128]);
        assert_eq!(cfg.trials, 7);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out_dir, "elsewhere");
        assert!(cfg.agents.iter().all(|a| a.setting == Some(1)));
        assert!(cfg.agents.iter().all(|a| a.tuning == Some(TuningRule::Thm34)));
    }

    #[test]
    fn tuning_rules_match_the_library_formulas() {
        let mut cfg = preset("scalar-duopoly").unwrap();
        cfg.t_grid = vec![256];
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let cert = res.global_cert.as_ref().unwrap();
        let (h, eta) = tune_setting2(&TuneSetting2 {
            n: 2,
            kappa_bar: cert.kappa,
            gamma_bar: cert.gamma,
            t: 256,
            c_eta: 1.0,
        })
        .unwrap();
        assert_eq!(res.cells[0].h, vec![h, h]);
        assert_eq!(res.cells[0].eta, vec![Some(eta), Some(eta)]);
        let table = tune_table(&res);
        assert!(table.contains("rule = thm33"));
        assert!(table.contains(&format!("H = {h}")));
    }

    #[test]
    fn simulate_writes_traces_summary_and_complete_manifest() {
        let dir = tempdir().unwrap();
        let cfg = duopoly_small(dir.path());
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let outcome = run_simulate(&res, 0).unwrap();
        assert!(outcome.check_failures.is_empty());
        assert!(dir.path().join("trace_T24_trial0.csv").exists());
        assert!(dir.path().join("trace_T24_trial1.csv").exists());
        assert!(dir.path().join("simulate_summary.csv").exists());
        let manifest_text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let manifest: Manifest = toml::from_str(&manifest_text).unwrap();
        assert!(!manifest.incomplete);
        assert_eq!(manifest.command, "simulate");
        assert!(manifest.certificates.iter().any(|c| c.scope == "global"));
    }

    #[test]
    fn manifest_rerun_reproduces_csvs_byte_for_byte() {
        let dir1 = tempdir().unwrap();
        let dir2 = tempdir().unwrap();
        let cfg = duopoly_small(dir1.path());
        let res = resolve(&cfg, Path::new(".")).unwrap();
        run_simulate(&res, 0).unwrap();

        let mut cfg2 = load_config(&dir1.path().join(MANIFEST_FILE)).unwrap();
        cfg2.out_dir = dir2.path().display().to_string();
        let res2 = resolve(&cfg2, Path::new(".")).unwrap();
        run_simulate(&res2, 2).unwrap();

        for name in [
            "trace_T24_trial0.csv",
            "trace_T24_trial1.csv",
            "simulate_summary.csv",
        ] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between original and manifest rerun");
        }
    }

    #[test]
    fn divergent_run_leaves_incomplete_manifest() {
        let dir = tempdir().unwrap();
        let mut cfg = duopoly_small(dir.path());
        // Large enough that even the contracting closed loop overshoots the
        // divergence guard on the very first step.
        cfg.system.as_mut().unwrap().x0 = Some(vec![1.0e12]);
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let err = run_simulate(&res, 0).unwrap_err();
        assert_eq!(exit_code_for(&err), 3, "{err}");
        let manifest: Manifest = toml::from_str(
            &std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(),
        )
        .unwrap();
        assert!(manifest.incomplete);
    }

    #[test]
    fn missing_cost_section_fails_before_artifacts() {
        let dir = tempdir().unwrap();
        let mut cfg = duopoly_small(dir.path());
        cfg.cost = None;
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let err = run_simulate(&res, 0).unwrap_err();
        assert_eq!(exit_code_for(&err), 2, "{err}");
        assert!(!dir.path().join(MANIFEST_FILE).exists());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn regret_emits_reports_curves_and_slopes() {
        let dir = tempdir().unwrap();
        let mut cfg = duopoly_small(dir.path());
        cfg.t_grid = vec![16, 24];
        cfg.solver = Some(SolverSpec {
            iters: Some(400),
            tol: Some(1e-6),
            restarts: Some(1),
        });
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let outcome = run_regret(&res, 0).unwrap();
        assert!(outcome.check_failures.is_empty());
        let table = std::fs::read_to_string(dir.path().join("regret.csv")).unwrap();
        // Header + 2 horizons x 2 trials x 2 agents.
        assert_eq!(table.lines().count(), 1 + 8);
        assert!(dir.path().join("curve_agent0.csv").exists());
        assert!(dir.path().join("curve_tail_agent1.csv").exists());
        let slopes = std::fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
        assert_eq!(slopes.lines().count(), 3);
    }

    #[test]
    fn regret_on_lower_bound_preset_emits_ratio_table() {
        let dir = tempdir().unwrap();
        let mut cfg = preset("lower-bound-dac").unwrap();
        cfg.t_grid = vec![25, 64];
        cfg.trials = 4;
        cfg.out_dir = dir.path().display().to_string();
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let outcome = run_regret(&res, 0).unwrap();
        let table = std::fs::read_to_string(dir.path().join("lower_bound.csv")).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("T,mean_regret,stderr,ratio,mean_cost_per_round"));
        // The DAC instance pays ~0.4 sqrt(T); both ratios land in the band.
        assert!(outcome.check_failures.is_empty(), "{:?}", outcome.check_failures);
    }

    #[test]
    fn impossible_check_band_reports_failures() {
        let dir = tempdir().unwrap();
        let mut cfg = preset("lower-bound-dac").unwrap();
        cfg.t_grid = vec![25];
        cfg.trials = 4;
        cfg.out_dir = dir.path().display().to_string();
        cfg.check.ratio_band = Some([10.0, 20.0]);
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let outcome = run_lower_bound(&res, 0).unwrap();
        assert!(!outcome.check_failures.is_empty());
    }

    #[test]
    fn eqgap_writes_per_cell_reports_and_summary() {
        let dir = tempdir().unwrap();
        let mut cfg = duopoly_small(dir.path());
        cfg.t_grid = vec![48];
        cfg.trials = 1;
        cfg.agents[0].tuning = Some(TuningRule::Manual);
        cfg.agents[0].h = Some(3);
        cfg.agents[1].tuning = Some(TuningRule::Manual);
        cfg.agents[1].h = Some(3);
        cfg.eqgap = Some(EqGapSpec {
            stride: Some(8),
            eta: None,
            smoothness_samples: None,
        });
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let outcome = run_eqgap(&res, 0).unwrap();
        assert!(outcome.warnings.is_empty(), "{:?}", outcome.warnings);
        let summary = std::fs::read_to_string(dir.path().join("eqgap_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 2);
        let row = summary.lines().nth(1).unwrap();
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], "48");
        assert_eq!(cells[10], "1", "path check should pass on a tuned run");
        assert_eq!(cells[11], "1", "chain check should pass on a tuned run");
        assert!(dir.path().join("eqgap_T48_trial0.csv").exists());
    }

    #[test]
    fn eqgap_requires_common_memory() {
        let dir = tempdir().unwrap();
        let mut cfg = duopoly_small(dir.path());
        cfg.agents[0].tuning = Some(TuningRule::Manual);
        cfg.agents[0].h = Some(2);
        cfg.agents[1].tuning = Some(TuningRule::Manual);
        cfg.agents[1].h = Some(5);
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let err = run_eqgap(&res, 0).unwrap_err();
        assert_eq!(exit_code_for(&err), 2);
    }

    #[test]
    fn certify_matrix_file_prints_certificate_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sys.csv");
        std::fs::write(&path, "0.5,0.0\n0.0,0.25\n").unwrap();
        let text = certify_matrix_file(&path).unwrap();
        assert!(text.contains("kappa = "));
        assert!(text.contains("gamma = 5.0000000000000000e-1"), "{text}");
    }

    #[test]
    fn certify_config_covers_global_and_agent_scopes() {
        let cfg = preset("scalar-duopoly").unwrap();
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let text = certify_config(&res).unwrap();
        assert!(text.contains("scope = global"));
        assert!(text.contains("scope = agent-0"));
        assert!(text.contains("scope = agent-1"));
    }

    #[test]
    fn joint_cost_tiles_the_control_target() {
        let cfg = preset("scalar-duopoly").unwrap();
        let res = resolve(&cfg, Path::new(".")).unwrap();
        let per_agent = build_agent_cost(&res, 24, 0).unwrap();
        let joint = build_joint_cost(&res, 24, 0).unwrap();
        assert_eq!(per_agent.dim_u(), 1);
        assert_eq!(joint.dim_u(), 2);
        // Both agents at u: the joint control penalty is the sum of the
        // per-agent penalties, the state term is charged once.
        let x = DVector::from_element(1, 0.8);
        let u1 = DVector::from_element(1, 0.4);
        let u2 = DVector::from_element(2, 0.4);
        let state_term = per_agent.value(0, &x, &DVector::zeros(1));
        let per = per_agent.value(0, &x, &u1);
        let joint_val = joint.value(0, &x, &u2);
        assert!((joint_val - (2.0 * per - state_term)).abs() < 1e-12);
    }

    #[test]
    fn tiled_sinusoidal_target_matches_stacked_emission() {
        let kind = DisturbanceKind::Sinusoidal {
            amplitude: 0.4,
            period: 12.0,
            phase: 0.3,
            direction: vec![1.0],
        };
        let single = DisturbanceGenerator::new(kind.clone(), 1, 1.0, 0).unwrap();
        let tiled_kind = tile_kind(&kind, 3).unwrap();
        let tiled = DisturbanceGenerator::new(tiled_kind, 3, 1.0, 0).unwrap();
        for t in 0..20 {
            let v = single.generate(t);
            let w = tiled.generate(t);
            for block in 0..3 {
                assert!((w[block] - v[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 2);
        assert_eq!(exit_code_for(&Error::ConfigParse("x".into())), 2);
        assert_eq!(
            exit_code_for(&Error::Dimension {
                context: "t",
                expected: "1".into(),
                got: "2".into()
            }),
            2
        );
        assert_eq!(
            exit_code_for(&Error::Divergence {
                round: 0,
                norm: 1e12,
                guard: 1e9
            }),
            3
        );
        assert_eq!(exit_code_for(&Error::Numerical("x".into())), 3);
    }
}
