//! Closed-loop harness: replans at a fixed rate and advances a plant that
//! executes the optimized commands with the same kinematic model the planner
//! simulates, i.e. perfect execution and localization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostBreakdown;
use crate::planner::{
    compute_motion_plan, FailureMonitor, PlanRequest, PlannerConfig, SeedProvenance,
};
use crate::scenario::Scenario;
use crate::tlt::TrajectoryLookupTable;
use crate::vehicle::{build_steering_profile, step, SteeringProfile, VehicleParams, VehicleState};
use crate::world::{cross_track_error, nearest_lane_index, ClearanceField, Lane};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad run log {path}: {reason}")]
    BadLog { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub planner: PlannerConfig,
    pub params: VehicleParams,
    /// Consecutive planning failures that stop the run.
    pub failure_limit: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            params: VehicleParams::default(),
            failure_limit: 10,
        }
    }
}

/// One plant integration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub phi: f64,
}

/// One planning cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// Simulation time at the start of the cycle.
    pub t: f64,
    pub elapsed_ms: f64,
    pub failed: bool,
    pub cost: Option<CostBreakdown>,
    pub seed: String,
    pub iterations: usize,
    /// Clearance at the cycle-end pose; large sentinel on obstacle-free maps.
    pub clearance: f64,
    pub cross_track: f64,
}

/// Why the closed loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    LaneEnd,
    DurationLimit,
    ConsecutiveFailures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub scenario: String,
    pub stop: StopReason,
    pub cycles: Vec<CycleRecord>,
    pub steps: Vec<StepRecord>,
}

/// Aggregates over a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub mean_cross_track: f64,
    pub max_cross_track: f64,
    pub mean_cycle_ms: f64,
    pub max_cycle_ms: f64,
    pub median_cycle_ms: f64,
    pub p95_cycle_ms: f64,
    pub min_clearance: f64,
    pub failure_cycles: usize,
    /// Fraction of the lane traversed, 0 to 1.
    pub completion: f64,
    pub cycles: usize,
    pub sim_time_s: f64,
}

/// Clearance values on obstacle-free maps are infinite; logs store this
/// finite stand-in instead so they stay JSON-clean.
pub const CLEARANCE_SENTINEL: f64 = 9.0e9;

/// Commands currently driving the plant: the steering profile of the last
/// accepted plan, its acceleration, and how far into it the plant has run.
struct HeldCommands {
    profile: SteeringProfile,
    accel: f64,
    time_in: f64,
}

/// Runs the scenario closed-loop: select a goal, plan, execute one replan
/// interval of the optimized commands on the plant, repeat. On planning
/// failure the previous commands keep running. Stops at lane end, the
/// duration limit, or after too many consecutive failures.
pub fn run_closed_loop(
    scenario: &Scenario,
    table: &TrajectoryLookupTable,
    config: &SimConfig,
) -> Result<(RunMetrics, RunLog), SimError> {
    scenario.validate().map_err(SimError::BadScenario)?;
    let field = ClearanceField::build(&scenario.grid);
    let mut lane = scenario.lane.clone();
    let params = config.params;
    let steps_per_cycle =
        ((1.0 / scenario.replan_hz) / params.dt + 0.5).floor().max(1.0) as usize;

    let mut x = scenario.initial;
    let mut held: Option<HeldCommands> = None;
    let mut monitor = FailureMonitor::new(config.failure_limit);
    let mut log = RunLog {
        scenario: scenario.name.clone(),
        stop: StopReason::DurationLimit,
        cycles: Vec::new(),
        steps: Vec::new(),
    };
    log.steps.push(step_record(&x));
    let mut max_lane_index = nearest_lane_index(&lane, x.x, x.y);
    let mut cte_sum = 0.0;
    let mut cte_max = 0.0f64;
    let mut cte_count = 0usize;
    let mut min_clearance = f64::INFINITY;

    let stop = loop {
        if x.t >= scenario.duration_limit_s {
            break StopReason::DurationLimit;
        }
        let nearest = nearest_lane_index(&lane, x.x, x.y);
        max_lane_index = max_lane_index.max(nearest);
        if nearest + 1 >= lane.len() {
            break StopReason::LaneEnd;
        }

        let (_, goal_index) = crate::world::select_goal(&lane, &x, scenario.horizon_s);
        lane.goal_index = goal_index;
        let cycle_t = x.t;
        let request = PlanRequest { x_o: x, lane: &lane, field: &field };
        let result = compute_motion_plan(&request, table, &config.planner, &params);
        let failed = result.is_failure();
        if let (Some(tcp), Some(accel)) = (result.tcp, result.accel) {
            let profile =
                build_steering_profile(x.phi, &tcp).expect("planner returned a valid tcp");
            held = Some(HeldCommands { profile, accel, time_in: 0.0 });
        }

        for _ in 0..steps_per_cycle {
            if let Some(h) = held.as_mut() {
                let rebased = VehicleState { t: h.time_in, ..x };
                let next = step(&rebased, h.accel, &h.profile, &params);
                h.time_in = next.t;
                x = VehicleState { t: x.t + params.dt, ..next };
            } else {
                // No commands yet: stay put, let the clock advance.
                x.t += params.dt;
            }
            log.steps.push(step_record(&x));
            let cte = cross_track_error(&lane, x.x, x.y);
            cte_sum += cte;
            cte_max = cte_max.max(cte);
            cte_count += 1;
            min_clearance = min_clearance.min(field.clearance(x.x, x.y).distance);
        }

        log.cycles.push(CycleRecord {
            t: cycle_t,
            elapsed_ms: result.elapsed_ms,
            failed,
            cost: result.cost,
            seed: provenance_label(result.seed_provenance),
            iterations: result.iterations,
            clearance: field.clearance(x.x, x.y).distance.min(CLEARANCE_SENTINEL),
            cross_track: cross_track_error(&lane, x.x, x.y),
        });
        if monitor.record(failed) {
            break StopReason::ConsecutiveFailures;
        }
    };
    log.stop = stop;
    max_lane_index = max_lane_index.max(nearest_lane_index(&lane, x.x, x.y));

    let mut times: Vec<f64> = log.cycles.iter().map(|c| c.elapsed_ms).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let metrics = RunMetrics {
        mean_cross_track: if cte_count > 0 { cte_sum / cte_count as f64 } else { 0.0 },
        max_cross_track: cte_max,
        mean_cycle_ms: mean(&times),
        max_cycle_ms: times.last().copied().unwrap_or(0.0),
        median_cycle_ms: percentile(&times, 0.5),
        p95_cycle_ms: percentile(&times, 0.95),
        min_clearance: min_clearance.min(CLEARANCE_SENTINEL),
        failure_cycles: log.cycles.iter().filter(|c| c.failed).count(),
        completion: max_lane_index as f64 / (lane.len() - 1) as f64,
        cycles: log.cycles.len(),
        sim_time_s: x.t,
    };
    Ok((metrics, log))
}

fn step_record(x: &VehicleState) -> StepRecord {
    StepRecord { t: x.t, x: x.x, y: x.y, theta: x.theta, v: x.v, phi: x.phi }
}

fn provenance_label(p: Option<SeedProvenance>) -> String {
    match p {
        Some(SeedProvenance::ExactCell) => "exact".to_string(),
        Some(SeedProvenance::NeighborFallback(d)) => format!("neighbor:{d}"),
        Some(SeedProvenance::Miss) => "miss".to_string(),
        None => "none".to_string(),
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Value at quantile `q` of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Writes `poses.csv` (one row per plant step) and `metrics.csv` (one row
/// per planning cycle) with stable columns. Identical logs export identical
/// bytes.
pub fn export_run(log: &RunLog, dir: &Path) -> Result<(), SimError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |e| SimError::Io { path: p.clone(), source: e }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let poses_path = dir.join("poses.csv");
    let mut poses = String::from("t,x,y,theta,v,phi\n");
    for s in &log.steps {
        poses.push_str(&format!("{},{},{},{},{},{}\n", s.t, s.x, s.y, s.theta, s.v, s.phi));
    }
    std::fs::write(&poses_path, poses).map_err(io_err(&poses_path))?;

    let metrics_path = dir.join("metrics.csv");
    let mut rows = String::from(
        "cycle,t,elapsed_ms,failed,seed,iterations,delta_lambda,delta_theta,delta_phi_bearing,d_obstacle,d_lane,total_cost,clearance,cross_track\n",
    );
    for (i, c) in log.cycles.iter().enumerate() {
        let cost_cols = match &c.cost {
            Some(b) => format!(
                "{},{},{},{},{},{}",
                b.delta_lambda, b.delta_theta, b.delta_phi_bearing, b.d_obstacle, b.d_lane, b.total
            ),
            None => ",,,,,".to_string(),
        };
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i,
            c.t,
            c.elapsed_ms,
            u8::from(c.failed),
            c.seed,
            c.iterations,
            cost_cols,
            c.clearance,
            c.cross_track
        ));
    }
    std::fs::write(&metrics_path, rows).map_err(io_err(&metrics_path))
}

/// Serializes a run log as JSON.
pub fn save_log(log: &RunLog, path: &Path) -> Result<(), SimError> {
    let data = serde_json::to_vec_pretty(log).expect("run logs always serialize");
    std::fs::write(path, data)
        .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })
}

pub fn load_log(path: &Path) -> Result<RunLog, SimError> {
    let data = std::fs::read(path)
        .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_slice(&data)
        .map_err(|e| SimError::BadLog { path: path.display().to_string(), reason: e.to_string() })
}

/// Recomputes per-run metrics from a log alone (no world model), used by the
/// log-export path. Cross-track and clearance aggregates come from the
/// cycle records.
pub fn metrics_from_log(log: &RunLog, lane: &Lane) -> RunMetrics {
    let mut times: Vec<f64> = log.cycles.iter().map(|c| c.elapsed_ms).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ctes: Vec<f64> = log
        .steps
        .iter()
        .map(|s| cross_track_error(lane, s.x, s.y))
        .collect();
    let max_index = log
        .steps
        .iter()
        .map(|s| nearest_lane_index(lane, s.x, s.y))
        .max()
        .unwrap_or(0);
    RunMetrics {
        mean_cross_track: mean(&ctes[1.min(ctes.len())..]),
        max_cross_track: ctes.iter().copied().fold(0.0, f64::max),
        mean_cycle_ms: mean(&times),
        max_cycle_ms: times.last().copied().unwrap_or(0.0),
        median_cycle_ms: percentile(&times, 0.5),
        p95_cycle_ms: percentile(&times, 0.95),
        min_clearance: log.cycles.iter().map(|c| c.clearance).fold(CLEARANCE_SENTINEL, f64::min),
        failure_cycles: log.cycles.iter().filter(|c| c.failed).count(),
        completion: max_index as f64 / (lane.len() - 1) as f64,
        cycles: log.cycles.len(),
        sim_time_s: log.steps.last().map(|s| s.t).unwrap_or(0.0),
    }
}
