//! Occupancy-grid world model: obstacle clearance via an exact Euclidean
//! distance transform, lane representation and goal selection.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::vehicle::{wrap_angle, VehicleState};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed map file {path}: {reason}")]
    BadMap { path: String, reason: String },
    #[error("malformed lane file {path}: {reason}")]
    BadLane { path: String, reason: String },
    #[error("lane needs at least 2 poses, got {0}")]
    LaneTooShort(usize),
}

/// Occupancy grid in row-major order; row 0 is the minimum-y edge.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    /// Cell edge length in meters.
    pub resolution: f64,
    /// World coordinates of the minimum corner of cell (0, 0).
    pub origin: (f64, f64),
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(width: usize, height: usize, resolution: f64, origin: (f64, f64)) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        Self { width, height, resolution, origin, cells: vec![false; width * height] }
    }

    #[inline]
    pub fn idx(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn is_occupied(&self, col: usize, row: usize) -> bool {
        self.cells[self.idx(col, row)]
    }

    pub fn set_occupied(&mut self, col: usize, row: usize, occupied: bool) {
        let i = self.idx(col, row);
        self.cells[i] = occupied;
    }

    /// Marks every cell whose center lies inside the axis-aligned rectangle.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        for row in 0..self.height {
            for col in 0..self.width {
                let (cx, cy) = self.cell_center(col, row);
                if cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1 {
                    self.set_occupied(col, row, true);
                }
            }
        }
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.resolution,
            self.origin.1 + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Grid cell containing a world point, or `None` if out of bounds.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin.0) / self.resolution).floor();
        let row = ((y - self.origin.1) / self.resolution).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            None
        } else {
            Some((col as usize, row as usize))
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Writes the text map format: a header with dimensions, resolution and
    /// origin, then one `0`/`1` row per grid row.
    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let io_err = |e| WorldError::Io { path: path.display().to_string(), source: e };
        let mut out = String::with_capacity(self.cells.len() + 128);
        out.push_str(&format!("width {}\n", self.width));
        out.push_str(&format!("height {}\n", self.height));
        out.push_str(&format!("resolution {}\n", self.resolution));
        out.push_str(&format!("origin {} {}\n", self.origin.0, self.origin.1));
        for row in 0..self.height {
            for col in 0..self.width {
                out.push(if self.is_occupied(col, row) { '1' } else { '0' });
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(out.as_bytes()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let io_err = |e| WorldError::Io { path: path.display().to_string(), source: e };
        let bad = |reason: &str| WorldError::BadMap {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let f = std::fs::File::open(path).map_err(io_err)?;
        let mut lines = BufReader::new(f).lines();
        let mut header = |key: &str| -> Result<Vec<String>, WorldError> {
            let line = lines
                .next()
                .ok_or_else(|| bad(&format!("missing `{key}` header line")))?
                .map_err(io_err)?;
            let mut parts = line.split_whitespace().map(str::to_string);
            match parts.next() {
                Some(k) if k == key => Ok(parts.collect()),
                _ => Err(bad(&format!("expected `{key}` header line, got `{line}`"))),
            }
        };
        let width: usize = header("width")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad width"))?;
        let height: usize = header("height")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad height"))?;
        let resolution: f64 = header("resolution")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad resolution"))?;
        let origin_parts = header("origin")?;
        if origin_parts.len() != 2 {
            return Err(bad("origin needs two values"));
        }
        let origin = (
            origin_parts[0].parse().map_err(|_| bad("bad origin x"))?,
            origin_parts[1].parse().map_err(|_| bad("bad origin y"))?,
        );
        if resolution <= 0.0 {
            return Err(bad("resolution must be positive"));
        }
        let mut grid = OccupancyGrid::empty(width, height, resolution, origin);
        for row in 0..height {
            let line = lines
                .next()
                .ok_or_else(|| bad(&format!("missing cell row {row}")))?
                .map_err(io_err)?;
            let line = line.trim();
            if line.len() != width {
                return Err(bad(&format!(
                    "cell row {row} has {} columns, expected {width}",
                    line.len()
                )));
            }
            for (col, ch) in line.chars().enumerate() {
                match ch {
                    '0' => {}
                    '1' => grid.set_occupied(col, row, true),
                    other => return Err(bad(&format!("unexpected cell `{other}` in row {row}"))),
                }
            }
        }
        Ok(grid)
    }
}

/// Clearance returned by a field lookup. Out-of-bounds points report zero
/// distance: unknown space near the map edge is treated as unsafe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub distance: f64,
    pub in_bounds: bool,
}

/// Per-cell distance to the nearest occupied cell, in meters. Occupied cells
/// hold zero; an obstacle-free grid holds infinity everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearanceField {
    width: usize,
    height: usize,
    resolution: f64,
    origin: (f64, f64),
    distance: Vec<f64>,
}

impl ClearanceField {
    /// Exact Euclidean distance transform of the grid, computed with the
    /// two-pass lower-envelope method on squared distances.
    pub fn build(grid: &OccupancyGrid) -> Self {
        let (w, h) = (grid.width, grid.height);
        let inf = f64::INFINITY;
        // Column pass: squared distance (in rows) to the nearest occupied
        // cell within each column.
        let mut colsq = vec![inf; w * h];
        for col in 0..w {
            let f: Vec<f64> = (0..h)
                .map(|row| if grid.is_occupied(col, row) { 0.0 } else { inf })
                .collect();
            let d = dt_1d(&f);
            for (row, v) in d.into_iter().enumerate() {
                colsq[row * w + col] = v;
            }
        }
        // Row pass over the column results.
        let mut distance = vec![inf; w * h];
        for row in 0..h {
            let f: Vec<f64> = (0..w).map(|col| colsq[row * w + col]).collect();
            let d = dt_1d(&f);
            for (col, v) in d.into_iter().enumerate() {
                distance[row * w + col] = v.sqrt() * grid.resolution;
            }
        }
        Self {
            width: w,
            height: h,
            resolution: grid.resolution,
            origin: grid.origin,
            distance,
        }
    }

    /// Clearance at a world point: the value of the containing cell, with no
    /// interpolation. Out-of-bounds points are reported as zero clearance.
    pub fn clearance(&self, x: f64, y: f64) -> Clearance {
        let col = ((x - self.origin.0) / self.resolution).floor();
        let row = ((y - self.origin.1) / self.resolution).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return Clearance { distance: 0.0, in_bounds: false };
        }
        let i = row as usize * self.width + col as usize;
        Clearance { distance: self.distance[i], in_bounds: true }
    }

    pub fn cell_distance(&self, col: usize, row: usize) -> f64 {
        self.distance[row * self.width + col]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// 1-D squared-distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // Parabola at p is vacuous; replace it.
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    for q in 0..n {
        let mut j = 0;
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        d[q] = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let dq = q as f64 - p as f64;
            dq * dq + f[p]
        };
    }
    d
}

/// One pose of the reference lane with its target velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl LanePose {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta), v }
    }
}

/// A slice of the global path: ordered poses roughly half a meter apart, with
/// the index of the currently selected goal pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub poses: Vec<LanePose>,
    pub goal_index: usize,
}

impl Lane {
    pub fn new(poses: Vec<LanePose>) -> Result<Self, WorldError> {
        if poses.len() < 2 {
            return Err(WorldError::LaneTooShort(poses.len()));
        }
        let goal_index = poses.len() - 1;
        Ok(Self { poses, goal_index })
    }

    pub fn goal(&self) -> LanePose {
        self.poses[self.goal_index]
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Total polyline arc length.
    pub fn arc_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .sum()
    }

    /// One `x y theta v` line per pose.
    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let io_err = |e| WorldError::Io { path: path.display().to_string(), source: e };
        let mut out = String::new();
        for p in &self.poses {
            out.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.theta, p.v));
        }
        std::fs::write(path, out).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let io_err = |e| WorldError::Io { path: path.display().to_string(), source: e };
        let bad = |reason: String| WorldError::BadLane { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(io_err)?;
        let mut poses = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", ln + 1)))?;
            if vals.len() != 4 {
                return Err(bad(format!("line {}: expected `x y theta v`", ln + 1)));
            }
            poses.push(LanePose::new(vals[0], vals[1], vals[2], vals[3]));
        }
        Lane::new(poses)
    }
}

/// Index of the lane pose nearest to a position; ties break to the smaller
/// index.
pub fn nearest_lane_index(lane: &Lane, x: f64, y: f64) -> usize {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, p) in lane.poses.iter().enumerate() {
        let d2 = (p.x - x).powi(2) + (p.y - y).powi(2);
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    best
}

/// Velocity floor used when converting lane distance to travel time, so a
/// stopped vehicle still receives a goal ahead of it.
pub const GOAL_VELOCITY_FLOOR: f64 = 1.0;

/// Selects the goal pose roughly `horizon_s` seconds of lane travel ahead of
/// the vehicle: walks forward from the nearest lane pose accumulating
/// `segment_length / max(lane velocity, floor)` and returns the first pose at
/// or past the horizon, or the last pose if the lane ends sooner.
pub fn select_goal(lane: &Lane, x_o: &VehicleState, horizon_s: f64) -> (LanePose, usize) {
    assert!(horizon_s > 0.0, "horizon must be positive");
    let start = nearest_lane_index(lane, x_o.x, x_o.y);
    let mut elapsed = 0.0;
    let mut idx = start;
    while idx + 1 < lane.poses.len() {
        let a = lane.poses[idx];
        let b = lane.poses[idx + 1];
        let seg = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        elapsed += seg / a.v.max(GOAL_VELOCITY_FLOOR);
        idx += 1;
        if elapsed >= horizon_s {
            break;
        }
    }
    (lane.poses[idx], idx)
}

/// Perpendicular distance from a point to the lane polyline (segment
/// projection, not nearest vertex).
pub fn cross_track_error(lane: &Lane, x: f64, y: f64) -> f64 {
    let mut best = f64::INFINITY;
    for w in lane.poses.windows(2) {
        let (ax, ay) = (w[0].x, w[0].y);
        let (bx, by) = (w[1].x, w[1].y);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { ((x - ax) * dx + (y - ay) * dy) / len2 } else { 0.0 };
        let t = t.clamp(0.0, 1.0);
        let (px, py) = (ax + t * dx, ay + t * dy);
        let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        if d < best {
            best = d;
        }
    }
    best
}
