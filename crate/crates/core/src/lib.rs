//! Long-horizon aerobatic quadrotor trajectories from diffusion-generated
//! maneuver primitives.
//!
//! The pipeline runs in four stages:
//!
//! * [`dataset`] builds expert primitives from parametric maneuver templates;
//! * [`diffusion`] trains a conditional x0-predicting denoiser over primitives
//!   and samples new ones from noise;
//! * [`guidance`] steers sampling away from obstacles using an SDF built by
//!   [`environment`], filters batches with a coarse collision check and chains
//!   primitives into a long-horizon sequence;
//! * [`postprocess`] turns the chained frames into a dynamically feasible
//!   piecewise-polynomial trajectory with a two-stage penalty optimization.
//!
//! [`kinematics`] holds the rotation and differential-flatness math shared by
//! all stages.

pub mod binio;
pub mod dataset;
pub mod diffusion;
pub mod environment;
pub mod guidance;
pub mod kinematics;
pub mod postprocess;

pub use kinematics::{FRAME_DT, QuadParams, Rot6D, StateFrame, Vec3};
