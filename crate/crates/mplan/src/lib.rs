//! Model-predictive on-road motion planner.
//!
//! Given a vehicle state, a reference lane, a goal on the lane and an
//! occupancy-grid map, the planner optimizes a steering-spline trajectory
//! with conjugate gradient, seeded from a precomputed trajectory lookup
//! table, and can run the whole thing closed-loop in simulation.

pub mod cli;
pub mod config;
pub mod cost;
pub mod optim;
pub mod planner;
pub mod scenario;
pub mod sim;
pub mod tlt;
pub mod vehicle;
pub mod world;

pub use vehicle::{
    build_steering_profile, curvature, simulate_trajectory, step, wrap_angle, SteeringProfile,
    Trajectory, TrajectoryControlParams, VehicleParams, VehicleState,
};
pub use world::{ClearanceField, Lane, LanePose, OccupancyGrid};
