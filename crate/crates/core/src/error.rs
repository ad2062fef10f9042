//! Error type shared by the plant, solver and controller layers.

use crate::control::{OpenLoopSolution, RiccatiKernel};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum CoreError<T: Scalar = f64> {
    #[error("linear velocity law hit zero: load {load} >= maximum load {max_load}")]
    NonPositiveVelocity { load: T, max_load: T },

    #[error("infeasible flux {flux}: line capacity is {capacity}")]
    InfeasibleFlux { flux: T, capacity: T },

    #[error("time step {dt} violates the resolution bound {bound}")]
    ResolutionViolation { dt: T, bound: T },

    #[error("influx is negative at t = {time}: {value}")]
    NegativeInflux { time: T, value: T },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("invalid ladder: {0}")]
    InvalidLadder(String),

    #[error("open-loop solve stalled at stationarity residual {residual}")]
    OpenLoopNoConvergence {
        residual: T,
        best: Box<OpenLoopSolution<T>>,
    },

    #[error("kernel relaxation stalled at residual {residual}")]
    RiccatiNoConvergence {
        residual: T,
        best: Box<RiccatiKernel<T>>,
    },

    #[error("kernel lost symmetry: defect {defect}")]
    NonSymmetricKernel { defect: T },

    #[error("malformed kernel file: {0}")]
    KernelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<V, T = f64> = std::result::Result<V, CoreError<T>>;
