//! The planning cycle: compute goal descriptors, fetch a seed from the
//! lookup table, refine it with conjugate gradient against the full
//! objective, validate, and emit the trajectory. Every failure mode
//! collapses to the empty trajectory with a reason code.

use std::time::Instant;

use crate::cost::{total_cost_at, CostBreakdown, CostWeights};
use crate::optim::{conjugate_gradient_minimize, OptimStatus, OptimizerOptions};
use crate::tlt::{get_dtd, get_td, SeedLookup, TrajectoryLookupTable};
use crate::vehicle::{
    simulate_trajectory_with_endpoint, Trajectory, TrajectoryControlParams, VehicleParams,
    VehicleState,
};
use crate::world::{nearest_lane_index, ClearanceField, Lane};

/// Acceptance thresholds for an optimized trajectory. These are planner
/// policy, not physics: a plan fails when its endpoint misses the goal by
/// more than any of them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityThresholds {
    /// Largest accepted goal range error, meters.
    pub max_range_error: f64,
    /// Largest accepted goal heading error magnitude, radians.
    pub max_heading_error: f64,
    /// Largest accepted goal bearing error magnitude, radians.
    pub max_bearing_error: f64,
}

impl Default for ValidityThresholds {
    fn default() -> Self {
        Self { max_range_error: 1.0, max_heading_error: 0.2, max_bearing_error: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub weights: CostWeights,
    /// Smallest allowed distance to an obstacle, meters.
    pub d_min: f64,
    pub optimizer: OptimizerOptions,
    pub validity: ValidityThresholds,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            d_min: 1.0,
            optimizer: OptimizerOptions::default(),
            validity: ValidityThresholds::default(),
        }
    }
}

/// One planning query. The goal is `lane.poses[lane.goal_index]`.
#[derive(Debug, Clone, Copy)]
pub struct PlanRequest<'a> {
    pub x_o: VehicleState,
    pub lane: &'a Lane,
    pub field: &'a ClearanceField,
}

/// Where the optimization seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedProvenance {
    ExactCell,
    /// Nearest occupied cell at this Chebyshev index distance.
    NeighborFallback(u32),
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    /// The goal descriptors fall outside the table's representable span.
    InvalidDescriptors,
    /// The whole table is empty.
    TableMiss,
    /// Optimization finished but the trajectory missed the goal tolerances.
    OptimizerInvalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Empty exactly when planning failed.
    pub trajectory: Trajectory,
    pub cost: Option<CostBreakdown>,
    pub tcp: Option<TrajectoryControlParams>,
    /// Constant acceleration the trajectory was simulated with.
    pub accel: Option<f64>,
    pub seed_provenance: Option<SeedProvenance>,
    pub failure: Option<FailureReason>,
    pub iterations: usize,
    pub elapsed_ms: f64,
}

impl PlanResult {
    pub fn is_failure(&self) -> bool {
        self.trajectory.is_empty()
    }

    fn failed(reason: FailureReason, provenance: Option<SeedProvenance>, start: Instant) -> Self {
        Self {
            trajectory: Trajectory::empty(),
            cost: None,
            tcp: None,
            accel: None,
            seed_provenance: provenance,
            failure: Some(reason),
            iterations: 0,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// Runs one full planning cycle.
pub fn compute_motion_plan(
    request: &PlanRequest,
    table: &TrajectoryLookupTable,
    config: &PlannerConfig,
    params: &VehicleParams,
) -> PlanResult {
    let start = Instant::now();
    let x_o = request.x_o;
    let lane = request.lane;
    let goal = lane.goal();

    let td = get_td(&x_o, &goal);
    let Some(dtd) = get_dtd(&td, table.spec()) else {
        return PlanResult::failed(FailureReason::InvalidDescriptors, None, start);
    };
    let (seed, provenance) = match table.lookup_seed(&dtd, x_o.phi) {
        Ok(SeedLookup::Exact(tcp)) => (tcp, SeedProvenance::ExactCell),
        Ok(SeedLookup::Neighbor(tcp, d)) => (tcp, SeedProvenance::NeighborFallback(d)),
        Ok(SeedLookup::Miss) => {
            return PlanResult::failed(FailureReason::TableMiss, Some(SeedProvenance::Miss), start)
        }
        Err(_) => return PlanResult::failed(FailureReason::InvalidDescriptors, None, start),
    };

    let window_start = nearest_lane_index(lane, x_o.x, x_o.y);
    let objective = move |tcp: &TrajectoryControlParams| -> f64 {
        evaluate_tcp(&x_o, lane, request.field, window_start, config, params, tcp)
            .map(|(_, b)| b.total)
            .unwrap_or(f64::INFINITY)
    };

    let result = conjugate_gradient_minimize(&objective, &seed, &config.optimizer);
    if result.status == OptimStatus::Invalid || !result.final_cost.is_finite() {
        return PlanResult::failed(FailureReason::OptimizerInvalid, Some(provenance), start);
    }

    let Some((trajectory, breakdown)) =
        evaluate_tcp(&x_o, lane, request.field, window_start, config, params, &result.tcp)
    else {
        return PlanResult::failed(FailureReason::OptimizerInvalid, Some(provenance), start);
    };
    let accel = (goal.v - x_o.v) / result.tcp.total_time;

    // Goal tolerances, plus a zero obstacle deficit: without the latter a
    // trajectory straight through a wall would count as valid, since the
    // goal terms know nothing about the map.
    let v = &config.validity;
    let valid = breakdown.delta_lambda < v.max_range_error
        && breakdown.delta_theta.abs() < v.max_heading_error
        && breakdown.delta_phi_bearing.abs() < v.max_bearing_error
        && breakdown.d_obstacle <= 0.0;
    if !valid {
        return PlanResult::failed(FailureReason::OptimizerInvalid, Some(provenance), start);
    }

    PlanResult {
        trajectory,
        cost: Some(breakdown),
        tcp: Some(result.tcp),
        accel: Some(accel),
        seed_provenance: Some(provenance),
        failure: None,
        iterations: result.iterations,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Simulates a candidate and scores it. The acceleration is implied by the
/// candidate's total time, so it is recomputed on every evaluation; the goal
/// terms are taken at the exact-time endpoint so the objective varies
/// smoothly with the total time.
pub(crate) fn evaluate_tcp(
    x_o: &VehicleState,
    lane: &Lane,
    field: &ClearanceField,
    window_start: usize,
    config: &PlannerConfig,
    params: &VehicleParams,
    tcp: &TrajectoryControlParams,
) -> Option<(Trajectory, CostBreakdown)> {
    let goal = lane.goal();
    let accel = (goal.v - x_o.v) / tcp.total_time;
    let (trajectory, endpoint) =
        simulate_trajectory_with_endpoint(x_o, accel, tcp, params).ok()?;
    let breakdown = total_cost_at(
        &trajectory,
        &endpoint,
        lane,
        field,
        x_o,
        window_start,
        &config.weights,
        config.d_min,
    )
    .ok()?;
    Some((trajectory, breakdown))
}

/// Counts consecutive planning failures and signals a stop at the limit.
#[derive(Debug, Clone, Copy)]
pub struct FailureMonitor {
    limit: usize,
    consecutive: usize,
}

impl FailureMonitor {
    pub fn new(limit: usize) -> Self {
        assert!(limit >= 1);
        Self { limit, consecutive: 0 }
    }

    /// Records one cycle outcome; returns true when the vehicle should stop.
    pub fn record(&mut self, failed: bool) -> bool {
        if failed {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        self.consecutive >= self.limit
    }

    pub fn consecutive_failures(&self) -> usize {
        self.consecutive
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tlt::{fill_table, DiscretizationSpec, TableBuildOptions};
    use crate::world::{LanePose, OccupancyGrid};
    use std::sync::OnceLock;

    /// Straight lane along +x with uniform velocity.
    fn lane(v: f64, goal_index: usize) -> Lane {
        let mut l = Lane::new(
            (0..201).map(|i| LanePose::new(i as f64 * 0.5, 0.0, 0.0, v)).collect(),
        )
        .unwrap();
        l.goal_index = goal_index;
        l
    }

    fn open_field() -> ClearanceField {
        ClearanceField::build(&OccupancyGrid::empty(300, 100, 0.2, (-10.0, -10.0)))
    }

    /// Shared mini-table covering the straight-lane test instances.
    fn table() -> &'static TrajectoryLookupTable {
        static TABLE: OnceLock<TrajectoryLookupTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let mut s = DiscretizationSpec::default();
            s.range.max = 3;
            s.bearing.min = 5;
            s.bearing.max = 9;
            s.heading.min = 5;
            s.heading.max = 9;
            s.steering.min = 7;
            s.steering.max = 7;
            s.velocity.max = 5;
            let opts = TableBuildOptions { knot_step: 0.1047, ..TableBuildOptions::default() };
            fill_table(&s, &VehicleParams::default(), &CostWeights::default(), &opts).0
        })
    }

    fn straight_request<'a>(lane: &'a Lane, field: &'a ClearanceField) -> PlanRequest<'a> {
        PlanRequest { x_o: VehicleState::at_origin(5.0, 0.0), lane, field }
    }

    #[test]
    fn straight_lane_plan_reaches_goal() {
        let lane = lane(5.0, 20); // goal 10 m ahead at the lane velocity
        let field = open_field();
        let req = straight_request(&lane, &field);
        let r = compute_motion_plan(&req, table(), &PlannerConfig::default(), &VehicleParams::default());
        assert!(!r.is_failure(), "failure: {:?}", r.failure);
        let fin = r.trajectory.final_state().unwrap();
        let goal = lane.goal();
        let miss = ((fin.x - goal.x).powi(2) + (fin.y - goal.y).powi(2)).sqrt();
        assert!(miss < 0.5, "missed goal by {miss} m");
        let b = r.cost.unwrap();
        assert!(b.delta_theta.abs() < 0.1, "heading error {}", b.delta_theta);
        // First state is the request state, timestamps advance by dt.
        assert_eq!(r.trajectory.states[0], req.x_o);
        let dt = VehicleParams::default().dt;
        for w in r.trajectory.states.windows(2) {
            assert!((w[1].t - w[0].t - dt).abs() < 1e-12);
        }
    }

    #[test]
    fn optimized_cost_never_exceeds_seed_cost() {
        let lane = lane(5.0, 20);
        let field = open_field();
        let req = straight_request(&lane, &field);
        let cfg = PlannerConfig::default();
        let params = VehicleParams::default();
        let r = compute_motion_plan(&req, table(), &cfg, &params);
        assert!(!r.is_failure());
        // Rebuild the seed the planner used and score it.
        let td = get_td(&req.x_o, &lane.goal());
        let dtd = get_dtd(&td, table().spec()).unwrap();
        let (SeedLookup::Exact(seed) | SeedLookup::Neighbor(seed, _)) =
            table().lookup_seed(&dtd, req.x_o.phi).unwrap()
        else {
            panic!("table miss");
        };
        let seed_cost =
            evaluate_tcp(&req.x_o, &lane, &field, 0, &cfg, &params, &seed).unwrap().1.total;
        assert!(r.cost.unwrap().total <= seed_cost + 1e-12);
    }

    #[test]
    fn goal_behind_vehicle_fails_with_invalid_descriptors() {
        let mut l = Lane::new(
            (0..40).map(|i| LanePose::new(-(i as f64) * 0.5, 0.0, 0.0, 5.0)).collect(),
        )
        .unwrap();
        l.goal_index = 30; // 15 m behind, bearing pi
        let field = open_field();
        let req = PlanRequest { x_o: VehicleState::at_origin(5.0, 0.0), lane: &l, field: &field };
        let r = compute_motion_plan(&req, table(), &PlannerConfig::default(), &VehicleParams::default());
        assert!(r.is_failure());
        assert_eq!(r.failure, Some(FailureReason::InvalidDescriptors));
    }

    #[test]
    fn fully_blocked_corridor_returns_empty_trajectory() {
        let lane = lane(5.0, 20);
        // Wall spanning the whole map across the lane at x in [4, 5.5].
        let mut grid = OccupancyGrid::empty(300, 100, 0.2, (-10.0, -10.0));
        grid.fill_rect(4.0, -10.0, 5.5, 10.0);
        let field = ClearanceField::build(&grid);
        let req = PlanRequest { x_o: VehicleState::at_origin(5.0, 0.0), lane: &lane, field: &field };
        let r = compute_motion_plan(&req, table(), &PlannerConfig::default(), &VehicleParams::default());
        assert!(r.is_failure());
        assert_eq!(r.failure, Some(FailureReason::OptimizerInvalid));
    }

    #[test]
    fn empty_table_reports_miss() {
        let lane = lane(5.0, 20);
        let field = open_field();
        let req = straight_request(&lane, &field);
        let empty = TrajectoryLookupTable::new(*table().spec());
        let r = compute_motion_plan(&req, &empty, &PlannerConfig::default(), &VehicleParams::default());
        assert!(r.is_failure());
        assert_eq!(r.failure, Some(FailureReason::TableMiss));
        assert_eq!(r.seed_provenance, Some(SeedProvenance::Miss));
    }

    #[test]
    fn identical_requests_plan_identically() {
        let lane = lane(5.0, 20);
        let field = open_field();
        let req = straight_request(&lane, &field);
        let cfg = PlannerConfig::default();
        let params = VehicleParams::default();
        let a = compute_motion_plan(&req, table(), &cfg, &params);
        let b = compute_motion_plan(&req, table(), &cfg, &params);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.tcp, b.tcp);
    }

    #[test]
    fn objective_gradient_agrees_with_forward_differences() {
        // Cross-check the central-difference gradient against a one-sided
        // scheme on the live planning objective.
        let lane = lane(5.0, 20);
        let field = open_field();
        let x_o = VehicleState::at_origin(5.0, 0.0);
        let cfg = PlannerConfig::default();
        let params = VehicleParams::default();
        let window = nearest_lane_index(&lane, x_o.x, x_o.y);
        let objective = |tcp: &TrajectoryControlParams| -> f64 {
            evaluate_tcp(&x_o, &lane, &field, window, &cfg, &params, tcp).unwrap().1.total
        };
        // Far from the optimum, where the smooth goal terms dominate and
        // every gradient component is well away from zero.
        let at = TrajectoryControlParams::new(3.0, 0.05, -0.1, 0.08);
        let central =
            crate::optim::numerical_gradient(&objective, &at, &cfg.optimizer).unwrap();
        let h = [2e-5, 2e-5, 2e-5, 2e-5];
        let base = objective(&at);
        let mut forward = [0.0; 4];
        for i in 0..4 {
            let mut v = [at.total_time, at.knots[0], at.knots[1], at.knots[2]];
            v[i] += h[i];
            let probe = TrajectoryControlParams::new(v[0], v[1], v[2], v[3]);
            forward[i] = (objective(&probe) - base) / h[i];
        }
        for i in 0..4 {
            let rel = (central[i] - forward[i]).abs() / central[i].abs().max(1e-6);
            assert!(
                rel < 1e-3 || (central[i] - forward[i]).abs() < 1e-4,
                "component {i}: central {} forward {}",
                central[i],
                forward[i]
            );
        }
    }

    #[test]
    fn failure_monitor_counts_consecutive_failures() {
        let mut m = FailureMonitor::new(10);
        for _ in 0..9 {
            assert!(!m.record(true));
        }
        assert!(!m.record(false));
        assert_eq!(m.consecutive_failures(), 0);
        let mut m = FailureMonitor::new(10);
        for i in 0..10 {
            let stop = m.record(true);
            assert_eq!(stop, i == 9);
        }
        let mut m = FailureMonitor::new(3);
        for _ in 0..50 {
            assert!(!m.record(true) || m.consecutive_failures() >= 3);
            assert!(!m.record(false));
        }
    }
}
