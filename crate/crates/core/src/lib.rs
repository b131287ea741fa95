//! Fair optimal inverter dispatch for PV-rich low-voltage feeders.
//!
//! [`netmodel`] builds the feeder and its voltage sensitivities, [`linflow`]
//! evaluates the linear flow model, [`acflow`] is the exact power-flow check,
//! [`inverter`] holds capability limits and the droop controller,
//! [`dispatch`] assembles and solves OID/FOID, and [`harness`] runs the
//! scenario sweep behind the `foid` binary.

pub mod acflow;
pub mod dispatch;
pub mod harness;
pub mod inverter;
pub mod linflow;
pub mod netmodel;

pub use dispatch::{solve_dispatch, CostCoefficients, DispatchSolution, FairnessMean, Strategy};
pub use harness::{builtin_case, run_sweep, Case, ScenarioConfig, StrategyKind, SweepRow};
pub use inverter::{droop_equilibrium, InverterSpec};
pub use netmodel::{load_network, NetworkModel};
