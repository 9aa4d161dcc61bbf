use thiserror::Error;

/// Errors raised by the planning, synthesis and analysis pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("argument {value} outside the domain [{lower}, {upper}]")]
    Domain { value: f64, lower: f64, upper: f64 },

    #[error("mass matrix is not positive definite (ill-conditioned model)")]
    IllConditionedMassMatrix,

    #[error("task target unreachable at grid index {index}: Newton did not converge")]
    Unreachable { index: usize },

    #[error("kinematic singularity at grid index {index} (|det J| = {det:e})")]
    Singular { index: usize, det: f64 },

    #[error("allocation infeasible at grid index {index}")]
    AllocationInfeasible { index: usize },

    #[error("Riccati solution diverged at grid index {index}")]
    RiccatiDiverged { index: usize },

    #[error("controllability Gramian diverged at grid index {index}")]
    GramianDiverged { index: usize },

    #[error("closed-loop simulation diverged at grid index {index}")]
    SimulationDiverged { index: usize },

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("weight search failed: all {candidates} candidates diverged")]
    SearchFailed { candidates: usize },

    #[error("malformed data file: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
