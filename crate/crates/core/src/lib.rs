//! Multi-agent online control on a shared linear dynamical system.
//!
//! N agents each inject a control input into one linear system
//!
//! ```text
//! x_{t+1} = A x_t + sum_i B_i u_t^i + w_t,   ||w_t|| <= W,
//! ```
//!
//! play disturbance-action policies on top of strongly stable linear
//! controllers, and adapt online by gradient steps on counterfactual
//! surrogate losses. The crate provides:
//!
//! * [`lds_core`]: system definition, disturbance generators, simulation
//!   loop, and replayable traces.
//! * [`costs`]: convex per-round cost oracles with certified growth and
//!   smoothness constants.
//! * [`stability`]: strong-stability certificates and stabilizing
//!   controller synthesis.
//! * [`dac_policy`]: disturbance-action policy parameters, feasible sets,
//!   and spectral projections.
//! * [`counterfactual`]: transfer operators, ideal-state expansions,
//!   surrogate losses and their gradients, plus the certified bound suite.
//! * [`gpc_agent`]: the online gradient agent in both information settings,
//!   step-size/horizon tuning, and the memory-aware OGD reference engine.
//! * [`regret_eval`]: policy-class comparators (best linear, best DAC),
//!   regret curves, and randomized lower-bound experiments.
//! * [`equilibrium`]: joint potential, best-response gaps, and the
//!   equilibrium-tracking run with its certified progress checks.
//! * [`harness`]: TOML experiment configs, presets, and the CLI driver.

pub mod costs;
pub mod counterfactual;
pub mod dac_policy;
pub mod equilibrium;
pub mod error;
pub mod gpc_agent;
pub mod harness;
pub mod lds_core;
pub mod linalg;
pub mod regret_eval;
pub mod stability;

pub use error::{Error, Result};
