//! Robust finite-horizon LQR synthesis for sit-to-stand maneuvers of a
//! three-link planar model of a powered lower-limb orthosis.
//!
//! Pipeline: [`planner`] builds a rest-to-rest reference in CoM coordinates and
//! lifts it to joint states and allocated inputs; [`linearizer`] produces the
//! LTV model along it; [`lqr`] integrates the Riccati equation for a weight
//! triple; [`robust`] scores the closed loop with a finite-horizon induced
//! gain from parameter perturbations to CoM errors; [`search`] picks weights
//! by brute force; [`simulator`] checks the result on the nonlinear model.
//!
//! Every kernel is generic over [`Real`]; the aliases below fix `f64`.

// NaN-rejecting validation reads best as `!(x > 0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod linearizer;
pub mod lqr;
pub mod model;
pub mod num;
pub mod planner;
pub mod robust;
pub mod search;
pub mod simulator;

pub use error::{Error, Result};
pub use num::Real;

pub type ParameterVector = model::ParameterVector<f64>;
pub type ParameterBox = model::ParameterBox<f64>;
pub type JointState = model::JointState<f64>;
pub type ManeuverSpec = planner::ManeuverSpec<f64>;
pub type AllocationSpec = planner::AllocationSpec<f64>;
pub type ReferenceTrajectory = planner::ReferenceTrajectory<f64>;
pub type LtvSystem = linearizer::LtvSystem<f64>;
pub type LqrWeights = lqr::LqrWeights<f64>;
pub type GainSchedule = lqr::GainSchedule<f64>;
pub type ParameterFilter = robust::ParameterFilter<f64>;
pub type ExtendedLtv = robust::ExtendedLtv<f64>;
pub type GainReport = robust::GainReport<f64>;
pub type RobustSettings = robust::RobustSettings<f64>;
pub type SearchResult = search::SearchResult<f64>;
pub type SimulationResult = simulator::SimulationResult<f64>;
