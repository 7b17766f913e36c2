//! Objective function for trajectory optimization: goal displacement, heading
//! and bearing errors, obstacle penalty and lane-adherence penalty, combined
//! as the square root of a weighted sum of squares.

use thiserror::Error;

use crate::vehicle::{wrap_angle, Trajectory, VehicleState};
use crate::world::{ClearanceField, Lane};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("cannot score an empty trajectory")]
    EmptyTrajectory,
}

/// Non-negative weights for the five cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    /// Goal range error.
    pub w1: f64,
    /// Goal heading error.
    pub w2: f64,
    /// Goal bearing error.
    pub w3: f64,
    /// Obstacle proximity penalty.
    pub w4: f64,
    /// Lane adherence penalty.
    pub w5: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        // Tuning values, not ground truth: the obstacle term must dominate
        // for safety, and the lane term sums over many poses so its unit
        // weight stays small.
        Self { w1: 1.0, w2: 1.0, w3: 1.0, w4: 50.0, w5: 0.05 }
    }
}

/// The individual cost terms and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostBreakdown {
    /// Goal range error in meters.
    pub delta_lambda: f64,
    /// Goal heading error in radians, wrapped to `(-pi, pi]`.
    pub delta_theta: f64,
    /// Goal bearing error in radians, wrapped to `(-pi, pi]`.
    pub delta_phi_bearing: f64,
    /// Summed obstacle-proximity deficit in meters.
    pub d_obstacle: f64,
    /// Summed lane-to-trajectory distance in meters.
    pub d_lane: f64,
    /// sqrt(w1*dl^2 + w2*dt^2 + w3*db^2 + w4*do^2 + w5*dlane^2).
    pub total: f64,
}

/// Difference in range from the start pose: `| |goal - start| - |final - start| |`.
pub fn goal_displacement_error(x_o: &VehicleState, goal: (f64, f64), fin: (f64, f64)) -> f64 {
    let rg = ((goal.0 - x_o.x).powi(2) + (goal.1 - x_o.y).powi(2)).sqrt();
    let rf = ((fin.0 - x_o.x).powi(2) + (fin.1 - x_o.y).powi(2)).sqrt();
    (rg - rf).abs()
}

/// Heading difference `theta_goal - theta_final`, wrapped to `(-pi, pi]`.
pub fn goal_heading_error(theta_goal: f64, theta_final: f64) -> f64 {
    wrap_angle(theta_goal - theta_final)
}

/// Angle between the start-to-goal and start-to-final vectors, wrapped to
/// `(-pi, pi]`. A zero-length vector is degenerate and reports zero with the
/// flag set.
pub fn goal_bearing_error(
    x_o: &VehicleState,
    goal: (f64, f64),
    fin: (f64, f64),
) -> (f64, bool) {
    let (gx, gy) = (goal.0 - x_o.x, goal.1 - x_o.y);
    let (fx, fy) = (fin.0 - x_o.x, fin.1 - x_o.y);
    if (gx == 0.0 && gy == 0.0) || (fx == 0.0 && fy == 0.0) {
        return (0.0, true);
    }
    (wrap_angle(gy.atan2(gx) - fy.atan2(fx)), false)
}

/// Summed clearance deficit along the trajectory:
/// `sum(max(0, d_min - clearance(pose)))`.
pub fn obstacle_penalty(trajectory: &Trajectory, field: &ClearanceField, d_min: f64) -> f64 {
    obstacle_penalty_points(
        trajectory.states.iter().map(|s| (s.x, s.y)),
        field,
        d_min,
    )
}

fn obstacle_penalty_points(
    points: impl Iterator<Item = (f64, f64)>,
    field: &ClearanceField,
    d_min: f64,
) -> f64 {
    debug_assert!(d_min > 0.0);
    points.map(|(x, y)| (d_min - field.clearance(x, y).distance).max(0.0)).sum()
}

/// Summed distance from each lane pose in the window to its nearest
/// trajectory pose, for lane poses from `window_start` through the goal
/// index. Exact linear scan.
pub fn lane_penalty(
    trajectory: &Trajectory,
    lane: &Lane,
    window_start: usize,
) -> Result<f64, CostError> {
    if trajectory.is_empty() {
        return Err(CostError::EmptyTrajectory);
    }
    let points: Vec<(f64, f64)> = trajectory.states.iter().map(|s| (s.x, s.y)).collect();
    Ok(lane_penalty_points(&points, lane, window_start))
}

fn lane_penalty_points(points: &[(f64, f64)], lane: &Lane, window_start: usize) -> f64 {
    let start = window_start.min(lane.goal_index);
    let mut sum = 0.0;
    for pose in &lane.poses[start..=lane.goal_index] {
        let mut best = f64::INFINITY;
        for (x, y) in points {
            let d2 = (pose.x - x) * (pose.x - x) + (pose.y - y) * (pose.y - y);
            if d2 < best {
                best = d2;
            }
        }
        sum += best.sqrt();
    }
    sum
}

/// Full objective evaluation over a simulated trajectory.
///
/// `window_start` is the lane index nearest the start pose; the lane penalty
/// covers lane poses from there through the lane's goal index.
pub fn total_cost(
    trajectory: &Trajectory,
    lane: &Lane,
    field: &ClearanceField,
    x_o: &VehicleState,
    window_start: usize,
    weights: &CostWeights,
    d_min: f64,
) -> Result<CostBreakdown, CostError> {
    let fin = *trajectory.final_state().ok_or(CostError::EmptyTrajectory)?;
    total_cost_at(trajectory, &fin, lane, field, x_o, window_start, weights, d_min)
}

/// As [`total_cost`] but with the goal terms taken at an explicit endpoint
/// state, which may sit a fractional step past the last trajectory state.
///
/// The endpoint also joins the penalty sums as a final pose; without it the
/// lane term measures to a pose set that recedes as the total time grows
/// within one integration step, which plants spurious local minima along
/// the total-time axis.
#[allow(clippy::too_many_arguments)]
pub fn total_cost_at(
    trajectory: &Trajectory,
    endpoint: &VehicleState,
    lane: &Lane,
    field: &ClearanceField,
    x_o: &VehicleState,
    window_start: usize,
    weights: &CostWeights,
    d_min: f64,
) -> Result<CostBreakdown, CostError> {
    let last = trajectory.final_state().ok_or(CostError::EmptyTrajectory)?;
    let goal = lane.goal();
    let delta_lambda = goal_displacement_error(x_o, (goal.x, goal.y), (endpoint.x, endpoint.y));
    let delta_theta = goal_heading_error(goal.theta, endpoint.theta);
    let (delta_phi_bearing, _) =
        goal_bearing_error(x_o, (goal.x, goal.y), (endpoint.x, endpoint.y));
    let mut points: Vec<(f64, f64)> =
        Vec::with_capacity(trajectory.states.len() + 1);
    points.extend(trajectory.states.iter().map(|s| (s.x, s.y)));
    if endpoint.t > last.t + 1e-12 {
        points.push((endpoint.x, endpoint.y));
    }
    let d_obstacle = obstacle_penalty_points(points.iter().copied(), field, d_min);
    let d_lane = lane_penalty_points(&points, lane, window_start);
    Ok(combine(delta_lambda, delta_theta, delta_phi_bearing, d_obstacle, d_lane, weights))
}

/// Combines raw terms under the weighted root-sum-of-squares rule.
pub fn combine(
    delta_lambda: f64,
    delta_theta: f64,
    delta_phi_bearing: f64,
    d_obstacle: f64,
    d_lane: f64,
    weights: &CostWeights,
) -> CostBreakdown {
    let total = (weights.w1 * delta_lambda * delta_lambda
        + weights.w2 * delta_theta * delta_theta
        + weights.w3 * delta_phi_bearing * delta_phi_bearing
        + weights.w4 * d_obstacle * d_obstacle
        + weights.w5 * d_lane * d_lane)
        .sqrt();
    CostBreakdown { delta_lambda, delta_theta, delta_phi_bearing, d_obstacle, d_lane, total }
}

/// Goal-term-only cost used when optimizing against an empty lane and map,
/// as in lookup-table generation.
pub fn goal_terms_cost(
    x_o: &VehicleState,
    goal_xy: (f64, f64),
    goal_theta: f64,
    fin: &VehicleState,
    weights: &CostWeights,
) -> f64 {
    let dl = goal_displacement_error(x_o, goal_xy, (fin.x, fin.y));
    let dt = goal_heading_error(goal_theta, fin.theta);
    let (db, _) = goal_bearing_error(x_o, goal_xy, (fin.x, fin.y));
    (weights.w1 * dl * dl + weights.w2 * dt * dt + weights.w3 * db * db).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{VehicleParams, VehicleState};
    use crate::world::{LanePose, OccupancyGrid};
    use proptest::prelude::*;

    fn state(x: f64, y: f64, theta: f64) -> VehicleState {
        VehicleState::new(x, y, theta, 1.0, 0.0, 0.0)
    }

    fn trajectory_of(points: &[(f64, f64)]) -> Trajectory {
        let dt = VehicleParams::default().dt;
        Trajectory {
            states: points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| VehicleState::new(x, y, 0.0, 1.0, 0.0, i as f64 * dt))
                .collect(),
        }
    }

    fn empty_field() -> ClearanceField {
        ClearanceField::build(&OccupancyGrid::empty(32, 32, 1.0, (-16.0, -16.0)))
    }

    #[test]
    fn displacement_zero_when_final_at_goal() {
        let o = state(0.0, 0.0, 0.0);
        assert_eq!(goal_displacement_error(&o, (3.0, 4.0), (3.0, 4.0)), 0.0);
    }

    #[test]
    fn displacement_is_range_difference() {
        let o = state(0.0, 0.0, 0.0);
        assert!((goal_displacement_error(&o, (3.0, 4.0), (0.6, 0.8)) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn displacement_ignores_bearing() {
        let o = state(0.0, 0.0, 0.0);
        // Equal range, different direction.
        assert!(goal_displacement_error(&o, (5.0, 0.0), (0.0, 5.0)).abs() < 1e-12);
    }

    #[test]
    fn heading_error_simple_and_wrapped() {
        assert_eq!(goal_heading_error(0.3, 0.3), 0.0);
        assert!((goal_heading_error(0.3, 0.1) - 0.2).abs() < 1e-12);
        // Wraps across the branch cut instead of reporting -6.2.
        let wrapped = goal_heading_error(-3.1, 3.1);
        assert!((wrapped - (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-12);
        assert!(wrapped > 0.0 && wrapped < 0.1);
    }

    #[test]
    fn heading_error_is_two_pi_periodic() {
        for k in -3i32..=3 {
            let shift = 2.0 * std::f64::consts::PI * k as f64;
            let base = goal_heading_error(0.4, -0.2);
            assert!((goal_heading_error(0.4 + shift, -0.2) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn bearing_error_basics() {
        let o = state(0.0, 0.0, 0.0);
        let (same, flag) = goal_bearing_error(&o, (2.0, 2.0), (4.0, 4.0));
        assert_eq!(same, 0.0);
        assert!(!flag);
        let (quarter, _) = goal_bearing_error(&o, (5.0, 0.0), (0.0, 5.0));
        assert!((quarter - (-std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
        let (deg, flag) = goal_bearing_error(&o, (5.0, 0.0), (0.0, 0.0));
        assert_eq!(deg, 0.0);
        assert!(flag);
    }

    #[test]
    fn obstacle_penalty_zero_when_clear() {
        let t = trajectory_of(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(obstacle_penalty(&t, &empty_field(), 1.0), 0.0);
    }

    #[test]
    fn obstacle_penalty_single_deficit() {
        let mut grid = OccupancyGrid::empty(32, 32, 1.0, (-16.0, -16.0));
        // Occupied cell centered at (0.5, 10.5).
        grid.set_occupied(16, 26, true);
        let field = ClearanceField::build(&grid);
        let d_min = 1.5;
        // One pose far away (clearance 10), one in the cell directly below
        // the obstacle (clearance exactly 1.0, deficit 0.5).
        let probe = field.clearance(0.5, 9.6).distance;
        assert!((probe - 1.0).abs() < 1e-12);
        let t = trajectory_of(&[(0.5, 0.5), (0.5, 9.6)]);
        let got = obstacle_penalty(&t, &field, d_min);
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lane_penalty_zero_on_exact_overlay() {
        let lane = Lane::new(
            (0..10).map(|i| LanePose::new(i as f64 * 0.5, 0.0, 0.0, 2.0)).collect(),
        )
        .unwrap();
        let t = trajectory_of(&(0..10).map(|i| (i as f64 * 0.5, 0.0)).collect::<Vec<_>>());
        assert!(lane_penalty(&t, &lane, 0).unwrap() < 1e-12);
    }

    #[test]
    fn lane_penalty_uniform_offset() {
        let mut lane = Lane::new(
            (0..10).map(|i| LanePose::new(i as f64 * 0.5, 0.0, 0.0, 2.0)).collect(),
        )
        .unwrap();
        lane.goal_index = 9;
        // Trajectory offset 0.5 m laterally, long enough that every lane pose
        // projects onto some trajectory pose directly above it.
        let t = trajectory_of(&(0..10).map(|i| (i as f64 * 0.5, 0.5)).collect::<Vec<_>>());
        let got = lane_penalty(&t, &lane, 0).unwrap();
        assert!((got - 5.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn lane_penalty_single_term_window() {
        let mut lane = Lane::new(
            (0..10).map(|i| LanePose::new(i as f64 * 0.5, 0.0, 0.0, 2.0)).collect(),
        )
        .unwrap();
        lane.goal_index = 4;
        let t = trajectory_of(&[(2.0, 0.3)]);
        let got = lane_penalty(&t, &lane, 4).unwrap();
        assert!((got - 0.3).abs() < 1e-12);
    }

    #[test]
    fn lane_penalty_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let lane = Lane::new(
                (0..40)
                    .map(|i| {
                        LanePose::new(
                            i as f64 * 0.5,
                            rng.gen_range(-1.0..1.0),
                            0.0,
                            2.0,
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let t = trajectory_of(
                &(0..30)
                    .map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(-2.0..2.0)))
                    .collect::<Vec<_>>(),
            );
            let start = rng.gen_range(0..lane.goal_index);
            let got = lane_penalty(&t, &lane, start).unwrap();
            let want: f64 = lane.poses[start..=lane.goal_index]
                .iter()
                .map(|p| {
                    t.states
                        .iter()
                        .map(|s| ((p.x - s.x).powi(2) + (p.y - s.y).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn total_cost_all_zero_terms() {
        let lane = Lane::new(vec![
            LanePose::new(0.0, 0.0, 0.0, 1.0),
            LanePose::new(1.0, 0.0, 0.0, 1.0),
        ])
        .unwrap();
        let t = trajectory_of(&[(0.0, 0.0), (1.0, 0.0)]);
        let o = state(0.0, 0.0, 0.0);
        let b = total_cost(&t, &lane, &empty_field(), &o, 0, &CostWeights::default(), 1.0).unwrap();
        assert!(b.total < 1e-12);
    }

    #[test]
    fn total_cost_three_four_five() {
        let w = CostWeights { w1: 1.0, w2: 1.0, w3: 1.0, w4: 1.0, w5: 1.0 };
        let b = combine(3.0, 0.0, 4.0, 0.0, 0.0, &w);
        assert!((b.total - 5.0).abs() < 1e-12);
        let single = combine(2.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert!((single.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_cost_rejects_empty_trajectory() {
        let lane = Lane::new(vec![
            LanePose::new(0.0, 0.0, 0.0, 1.0),
            LanePose::new(1.0, 0.0, 0.0, 1.0),
        ])
        .unwrap();
        let o = state(0.0, 0.0, 0.0);
        let err = total_cost(
            &Trajectory::empty(),
            &lane,
            &empty_field(),
            &o,
            0,
            &CostWeights::default(),
            1.0,
        );
        assert_eq!(err.unwrap_err(), CostError::EmptyTrajectory);
    }

    #[test]
    fn doubling_a_weight_doubles_its_squared_contribution() {
        let w = CostWeights::default();
        let b = combine(1.2, 0.3, -0.2, 0.4, 2.0, &w);
        let w2 = CostWeights { w4: w.w4 * 2.0, ..w };
        let b2 = combine(1.2, 0.3, -0.2, 0.4, 2.0, &w2);
        // Obstacle share of total^2 is whatever the other terms leave over.
        let others = w.w1 * b.delta_lambda.powi(2)
            + w.w2 * b.delta_theta.powi(2)
            + w.w3 * b.delta_phi_bearing.powi(2)
            + w.w5 * b.d_lane.powi(2);
        let share1 = b.total * b.total - others;
        let share2 = b2.total * b2.total - others;
        assert!((share2 / share1 - 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn angle_terms_stay_wrapped(
            tg in -10.0_f64..10.0,
            tf in -10.0_f64..10.0,
        ) {
            let d = goal_heading_error(tg, tf);
            prop_assert!(d > -std::f64::consts::PI && d <= std::f64::consts::PI);
        }

        #[test]
        fn total_cost_invariant_under_rigid_transform(
            angle in -3.0_f64..3.0,
            tx in -30.0_f64..30.0,
            ty in -30.0_f64..30.0,
        ) {
            let lane = Lane::new(
                (0..20).map(|i| LanePose::new(i as f64 * 0.5, (i as f64 * 0.3).sin(), 0.1, 2.0)).collect(),
            ).unwrap();
            let t = trajectory_of(
                &(0..15).map(|i| (i as f64 * 0.6, 0.2 + (i as f64 * 0.2).cos() * 0.5)).collect::<Vec<_>>(),
            );
            let o = state(0.1, -0.2, 0.05);
            let w = CostWeights::default();
            let base = total_cost(&t, &lane, &empty_field(), &o, 0, &w, 1.0).unwrap();

            let (s, c) = angle.sin_cos();
            let xf = |x: f64, y: f64| (c * x - s * y + tx, s * x + c * y + ty);
            let lane2 = Lane::new(lane.poses.iter().map(|p| {
                let (x, y) = xf(p.x, p.y);
                LanePose::new(x, y, wrap_angle(p.theta + angle), p.v)
            }).collect()).unwrap();
            let t2 = Trajectory { states: t.states.iter().map(|st| {
                let (x, y) = xf(st.x, st.y);
                VehicleState::new(x, y, wrap_angle(st.theta + angle), st.v, st.phi, st.t)
            }).collect() };
            let (ox, oy) = xf(o.x, o.y);
            let o2 = VehicleState::new(ox, oy, wrap_angle(o.theta + angle), o.v, o.phi, o.t);
            // Big empty field so the transformed scene stays in bounds.
            let field = ClearanceField::build(&OccupancyGrid::empty(64, 64, 2.0, (-64.0, -64.0)));
            let moved = total_cost(&t2, &lane2, &field, &o2, 0, &w, 1.0).unwrap();
            prop_assert!((base.total - moved.total).abs() < 1e-9,
                "base {} moved {}", base.total, moved.total);
        }

        #[test]
        fn nonnegative_terms(
            gx in -20.0_f64..20.0, gy in -20.0_f64..20.0,
            fx in -20.0_f64..20.0, fy in -20.0_f64..20.0,
        ) {
            let o = state(0.0, 0.0, 0.0);
            prop_assert!(goal_displacement_error(&o, (gx, gy), (fx, fy)) >= 0.0);
        }
    }
}
