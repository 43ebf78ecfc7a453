//! Economic model predictive control without terminal constraints.
//!
//! The open-loop cost penalizes the state increment `Δ = ‖f(x,u) − x‖ / τ`
//! next to the economic stage cost and weights the final stage by `γ`:
//!
//! ```text
//! J(u, x) = γ [ℓ_N + α Δ_N] + Σ_{k=0}^{N−1} [ℓ_k + α Δ_k]
//! ```
//!
//! No terminal set and no knowledge of the optimal steady pair enter the
//! controller. Everything is generic over [`Scalar`] (`f32`/`f64`); the
//! `f64` aliases below are what the CLI and the benchmarks use.

pub mod analysis;
pub mod checks;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod models;
pub mod objective;
pub mod scalar;
pub mod sequence;
pub mod solver;
pub mod steady;

pub use dynamics::{ControlBounds, DiscreteDynamics, DiscreteMap, OdeModel, StepJacobians, Trajectory};
pub use error::{EmpcError, Result};
pub use models::{build_model, Cstr, Integrator, LinearTest, ModelEntry, ModelParams};
pub use objective::{
    build_stage_cost, AffineConstraint, ConstantCost, CostBreakdown, EconomicObjective, LinearStateCost, QuadraticCost, StageCost,
};
pub use scalar::Scalar;
pub use sequence::ControlSequence;
pub use analysis::{
    lemma_one_scan, quasi_steady, terminal_bound_sweep, LemmaOneReport, LemmaOneSample, QuasiSteadyReport,
    EquilibriumBand, EnvelopeFit, LevelSummary, SampleBox, SampleRegion, TerminalBoundPoint, TerminalBoundReport,
    Thresholds,
};
pub use controller::{simulate, ClosedLoopLog, Controller, EmpcConfig, LogEntry};
pub use steady::{optimal_steady_pair, steady_state_for_input, SteadyPair};
pub use solver::{
    gradient, solve, solve_with_observer, GradientMode, IterationRecord, SolveResult, SolverSettings, Termination,
};

pub type Dynamics = DiscreteDynamics<f64>;
pub type Objective = EconomicObjective<f64>;
pub type Sequence = ControlSequence<f64>;
pub type Bounds = ControlBounds<f64>;
pub type Settings = SolverSettings<f64>;
pub type Solution = SolveResult<f64>;
pub type Steady = SteadyPair<f64>;
pub type Config = EmpcConfig<f64>;
pub type Log = ClosedLoopLog<f64>;
