//! Chained frames to a dynamically feasible piecewise-polynomial trajectory.
//!
//! Keyframes are picked where the body z-axis turns by more than a threshold,
//! each keyframe segment gets an axis-aligned corridor grown in the SDF, and
//! the intermediate waypoints and segment durations are optimized under
//! penalty terms for speed, thrust, body rates and corridor containment. The
//! solve runs twice: first without the yaw-rate penalty, then fully
//! constrained from that warm start.

pub mod corridor;
pub mod costs;
pub mod keyframes;
pub mod lbfgs;
pub mod optimize;
pub mod spline;

use crate::kinematics::KinematicsError;
use thiserror::Error;

pub use corridor::{build_corridor, Corridor, CorridorParams, Polyhedron};
pub use costs::{eval_costs, CostBreakdown, CostWeights, OptProblem, PenaltyLimits};
pub use keyframes::{extract_keyframes, Keyframes};
pub use optimize::{
    audit_trajectory, estimate_boundary, hierarchical_optimize, postprocess_frames, prepare_problem,
    trajectory_csv, Decision, FeasibilityAudit, OptOutcome, OptReport, PostprocessConfig, SolveMode,
};
pub use spline::{spline_from_waypoints, PolySpline};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular spline system (zero pivot at row {row})")]
    SingularSystem { row: usize },
    #[error("corridor failure on segment {segment}: {reason}")]
    Corridor { segment: usize, reason: String },
    #[error("flatness singularity at t = {time:.3} s: {reason}")]
    FlatnessSingularity { time: f64, reason: String },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}
