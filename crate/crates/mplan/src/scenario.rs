//! Synthetic scenario generators: lane geometries, occupancy maps and
//! starting states for closed-loop runs. Everything the acceptance runs need
//! ships from here, no external data required.

use crate::vehicle::VehicleState;
use crate::world::{Lane, LanePose, OccupancyGrid};

/// A closed-loop run description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub grid: OccupancyGrid,
    pub lane: Lane,
    pub initial: VehicleState,
    /// Target cruise velocity the lane was generated with, m/s.
    pub cruise: f64,
    /// Replanning rate, Hz.
    pub replan_hz: f64,
    /// Goal horizon ahead of the vehicle, seconds.
    pub horizon_s: f64,
    /// Hard stop for the simulation clock, seconds.
    pub duration_limit_s: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.replan_hz > 0.0) {
            return Err(format!("replan rate must be positive, got {}", self.replan_hz));
        }
        if !(self.horizon_s > 0.0) {
            return Err(format!("goal horizon must be positive, got {}", self.horizon_s));
        }
        if self.grid.cell_of(self.initial.x, self.initial.y).is_none() {
            return Err("initial state lies outside the map".to_string());
        }
        Ok(())
    }
}

/// Lane poses every `spacing` meters along a piecewise-constant curvature
/// profile `(segment_length, curvature)`, starting at the origin with
/// heading zero.
///
/// Velocities hold `cruise` and taper linearly over the last 10 m down to a
/// floor rather than zero: goals closer than the smallest representable
/// range cell (about 0.8 m) cannot be planned for, and the floor carries the
/// vehicle across that final blind zone faster than the failure monitor
/// window.
pub fn lane_from_segments(segments: &[(f64, f64)], spacing: f64, cruise: f64) -> Lane {
    const TAPER_DISTANCE: f64 = 10.0;
    const TAPER_FLOOR: f64 = 1.8;
    let total: f64 = segments.iter().map(|s| s.0).sum();
    let mut poses = Vec::new();
    let (mut x, mut y, mut theta) = (0.0f64, 0.0f64, 0.0f64);
    let mut travelled = 0.0;
    let mut seg_iter = segments.iter().copied();
    let (mut seg_left, mut kappa) = seg_iter.next().unwrap_or((0.0, 0.0));
    let velocity = |s: f64| -> f64 {
        let remaining = (total - s).max(0.0);
        if remaining >= TAPER_DISTANCE {
            cruise
        } else {
            (cruise * remaining / TAPER_DISTANCE).clamp(TAPER_FLOOR.min(cruise), cruise)
        }
    };
    poses.push(LanePose::new(x, y, theta, velocity(0.0)));
    while travelled + spacing <= total + 1e-9 {
        let mut left = spacing;
        while left > 1e-12 {
            let d = left.min(seg_left);
            if kappa.abs() < 1e-12 {
                x += d * theta.cos();
                y += d * theta.sin();
            } else {
                // Exact advance along a circular arc.
                let r = 1.0 / kappa;
                let t2 = theta + kappa * d;
                x += r * (t2.sin() - theta.sin());
                y += r * (theta.cos() - t2.cos());
                theta = t2;
            }
            seg_left -= d;
            left -= d;
            if seg_left <= 1e-12 {
                if let Some((l, k)) = seg_iter.next() {
                    seg_left = l;
                    kappa = k;
                } else {
                    seg_left = f64::INFINITY;
                    kappa = 0.0;
                }
            }
        }
        travelled += spacing;
        poses.push(LanePose::new(x, y, theta, velocity(travelled)));
    }
    Lane::new(poses).expect("generated lanes have plenty of poses")
}

fn start_at_lane_head(lane: &Lane) -> VehicleState {
    let p0 = lane.poses[0];
    VehicleState::new(p0.x, p0.y, p0.theta, 0.0, 0.0, 0.0)
}

/// Straight 100 m lane on an obstacle-free map.
pub fn straight(cruise: f64) -> Scenario {
    let lane = lane_from_segments(&[(100.0, 0.0)], 0.5, cruise);
    let grid = OccupancyGrid::empty(512, 64, 0.2, (-1.2, -6.4));
    Scenario {
        name: "straight".to_string(),
        initial: start_at_lane_head(&lane),
        lane,
        grid,
        cruise,
        replan_hz: 20.0,
        horizon_s: 5.0,
        duration_limit_s: 60.0,
    }
}

/// Constant-curvature arc lane (left turn) on an obstacle-free map.
pub fn arc(radius: f64, cruise: f64) -> Scenario {
    let lane = lane_from_segments(&[(10.0, 0.0), (60.0, 1.0 / radius)], 0.5, cruise);
    // Size the map around the lane's bounding box.
    let (grid, _) = grid_around(&lane, 6.0);
    Scenario {
        name: "arc".to_string(),
        initial: start_at_lane_head(&lane),
        lane,
        grid,
        cruise,
        replan_hz: 20.0,
        horizon_s: 5.0,
        duration_limit_s: 60.0,
    }
}

/// 100 m S-curve: two opposing 30 m-radius arcs between straights, fitted
/// into a 512 x 64 cell map at 0.2 m resolution.
pub fn s_curve(cruise: f64) -> Scenario {
    let r = 30.0;
    let arc_len = 11.0;
    let lane = lane_from_segments(
        &[(20.0, 0.0), (arc_len, 1.0 / r), (arc_len, -1.0 / r), (58.0, 0.0)],
        0.5,
        cruise,
    );
    let grid = OccupancyGrid::empty(512, 64, 0.2, (-1.2, -4.2));
    Scenario {
        name: "s-curve".to_string(),
        initial: start_at_lane_head(&lane),
        lane,
        grid,
        cruise,
        replan_hz: 20.0,
        horizon_s: 5.0,
        duration_limit_s: 60.0,
    }
}

/// Straight lane with a rectangular obstruction intruding 1 m into the
/// 1.5 m-half-width corridor: the obstacle spans 2 m along the lane and
/// reaches laterally to 0.5 m short of the centerline.
pub fn lane_with_obstruction(cruise: f64) -> Scenario {
    let mut s = straight(cruise);
    s.name = "obstruction".to_string();
    s.grid.fill_rect(45.0, -3.5, 47.0, -0.5);
    s
}

/// Looks a generator up by its CLI name.
pub fn by_name(name: &str, cruise: f64) -> Option<Scenario> {
    match name {
        "straight" => Some(straight(cruise)),
        "arc" => Some(arc(30.0, cruise)),
        "s-curve" | "scurve" => Some(s_curve(cruise)),
        "obstruction" | "obstacle" => Some(lane_with_obstruction(cruise)),
        _ => None,
    }
}

pub const SCENARIO_NAMES: &[&str] = &["straight", "arc", "s-curve", "obstruction"];

/// Obstacle-free grid sized to a lane's bounding box plus a margin.
fn grid_around(lane: &Lane, margin: f64) -> (OccupancyGrid, (f64, f64)) {
    let res = 0.2;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &lane.poses {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let origin = (x0 - margin, y0 - margin);
    let width = ((x1 - x0 + 2.0 * margin) / res).ceil() as usize;
    let height = ((y1 - y0 + 2.0 * margin) / res).ceil() as usize;
    (OccupancyGrid::empty(width, height, res, origin), origin)
}
