//! Continuum model of a re-entrant production line with optimal boundary
//! control and demand-rate tracking.
//!
//! The plant is a transport equation for the product density over the unit
//! production stage, closed by a WIP-dependent velocity law. On top of it
//! this crate builds the frozen-velocity linearization with its staging
//! ladder, the quadratic-cost open-loop and kernel-Riccati state-feedback
//! controllers, the exosystem-driven tracking regulator, and the mini-fab
//! step-demand experiment.
//!
//! All numerics are generic over the scalar type through [`scalar::Scalar`];
//! every public type defaults its parameter to `f64`, so `DensityField`,
//! `RiccatiKernel` etc. name the double-precision instantiations unless a
//! scalar is spelled out.

pub mod control;
pub mod error;
pub mod experiments;
pub mod linear;
pub mod regulator;
pub mod scalar;
pub mod transport;

pub use control::{
    cost, costate_sweep, feedback_control, simulate_linear_grid, solve_open_loop,
    solve_riccati_steady, solve_riccati_transient, stationarity_gradient, CostWeights,
    OpenLoopSolution, RiccatiKernel, SpaceTimeGrid, StateWeight, TerminalWeight,
};
pub use error::{CoreError, Result};
pub use experiments::{
    compute_metrics, metrics_csv, minifab_params, run_step_demand, sweep, GridConfig,
    MinifabScenario, SweepRow, TrackingMetrics, METRICS_CSV_HEADER,
};
pub use linear::{
    build_ladder, linearization_gap, linearize, simulate_linear, LinearModel, LinearStepper,
    StageLadder,
};
pub use regulator::{
    build_staged_controller, exo_state, feedforward_gain, run_tracking, solve_regulator,
    stage_control, write_bundle, DemandSignal, ExoBlock, Exosystem, FeedforwardSolution, Stage,
    StagedController, TrackingRun,
};
pub use scalar::Scalar;
pub use transport::{
    simulate_nonlinear, steady_density_for_flux, velocity, wip, DensityField, NonlinearStepper,
    StepRecord, TimeSeries, VelocityParams, VelocityVariant,
};
