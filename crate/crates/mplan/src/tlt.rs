//! Trajectory lookup table: a 5-D table of precomputed optimization seeds,
//! indexed by discretized descriptors of the start state and the goal
//! relative to it.
//!
//! Angles and the goal bearing are expressed in the frame of the start pose,
//! so one table serves every pose in the world. The range, heading, velocity
//! and steering dimensions use a logarithmic discretization that is fine near
//! zero and coarse far out; the bearing dimension is linear.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::cost::{goal_terms_cost, CostWeights};
use crate::optim::{minimize_bounded, OptimStatus, OptimizerOptions};
use crate::vehicle::{
    simulate_endpoint, wrap_angle, SteeringProfile, TrajectoryControlParams, VehicleParams,
    VehicleState,
};
use crate::world::LanePose;

#[derive(Debug, Error)]
pub enum TltError {
    #[error("descriptor index {index} outside bounds [{min}, {max}] of dimension {dim}")]
    IndexOutOfBounds { dim: &'static str, index: i32, min: i32, max: i32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad table file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("table file {path} was built with different discretization parameters")]
    SpecMismatch { path: String },
}

/// Continuous trajectory descriptors, all in the frame of the start pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryDescriptors {
    /// Straight-line distance to the goal, meters.
    pub range: f64,
    /// Direction of the goal, radians in `(-pi, pi]`.
    pub bearing: f64,
    /// Goal heading, radians in `(-pi, pi]`.
    pub heading: f64,
    /// Start velocity, m/s.
    pub velocity: f64,
    /// Start steering angle, radians.
    pub steering: f64,
}

/// Integer descriptor indices addressing the lookup table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteDescriptors {
    pub range: i32,
    pub bearing: i32,
    pub heading: i32,
    pub velocity: i32,
    pub steering: i32,
}

/// Parameters of one log-discretized dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDim {
    /// Compression ratio, > 1.
    pub cr: f64,
    /// Scale factor, > 0.
    pub sf: f64,
    /// Zero index: the index a zero value maps to.
    pub zi: i32,
    pub min: i32,
    pub max: i32,
    /// Signed dimensions mirror the mapping around zero.
    pub signed: bool,
}

/// Parameters of one linearly discretized dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinDim {
    /// Cell width in the dimension's unit.
    pub cd: f64,
    pub zi: i32,
    pub min: i32,
    pub max: i32,
}

/// Per-dimension discretization parameters and bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationSpec {
    pub range: LogDim,
    pub bearing: LinDim,
    pub heading: LogDim,
    pub steering: LogDim,
    pub velocity: LogDim,
}

impl Default for DiscretizationSpec {
    fn default() -> Self {
        Self {
            range: LogDim { cr: 1.8, sf: 2.3, zi: -1, min: 0, max: 15, signed: false },
            bearing: LinDim { cd: 0.139, zi: 7, min: 0, max: 15 },
            heading: LogDim { cr: 1.3, sf: 0.174, zi: 7, min: 0, max: 15, signed: true },
            steering: LogDim { cr: 1.394, sf: 0.052, zi: 7, min: 0, max: 15, signed: true },
            velocity: LogDim { cr: 1.381, sf: 1.3, zi: 0, min: 0, max: 8, signed: false },
        }
    }
}

impl DiscretizationSpec {
    /// Dimension sizes in table order: range, bearing, heading, steering,
    /// velocity.
    pub fn dims(&self) -> [usize; 5] {
        [
            (self.range.max - self.range.min + 1) as usize,
            (self.bearing.max - self.bearing.min + 1) as usize,
            (self.heading.max - self.heading.min + 1) as usize,
            (self.steering.max - self.steering.min + 1) as usize,
            (self.velocity.max - self.velocity.min + 1) as usize,
        ]
    }

    pub fn total_cells(&self) -> usize {
        self.dims().iter().product()
    }

    fn linear_index(&self, d: &DiscreteDescriptors) -> Option<usize> {
        let dims = self.dims();
        let r = checked_offset(d.range, self.range.min, dims[0])?;
        let b = checked_offset(d.bearing, self.bearing.min, dims[1])?;
        let h = checked_offset(d.heading, self.heading.min, dims[2])?;
        let s = checked_offset(d.steering, self.steering.min, dims[3])?;
        let v = checked_offset(d.velocity, self.velocity.min, dims[4])?;
        Some((((r * dims[1] + b) * dims[2] + h) * dims[3] + s) * dims[4] + v)
    }

    fn descriptors_of(&self, linear: usize) -> DiscreteDescriptors {
        let dims = self.dims();
        let v = linear % dims[4];
        let rest = linear / dims[4];
        let s = rest % dims[3];
        let rest = rest / dims[3];
        let h = rest % dims[2];
        let rest = rest / dims[2];
        let b = rest % dims[1];
        let r = rest / dims[1];
        DiscreteDescriptors {
            range: r as i32 + self.range.min,
            bearing: b as i32 + self.bearing.min,
            heading: h as i32 + self.heading.min,
            steering: s as i32 + self.steering.min,
            velocity: v as i32 + self.velocity.min,
        }
    }
}

fn checked_offset(index: i32, min: i32, size: usize) -> Option<usize> {
    let off = index.checked_sub(min)?;
    if off < 0 || off as usize >= size {
        None
    } else {
        Some(off as usize)
    }
}

/// Logarithmic discretization: `round(log_cr((|v| + sf) / sf)) * sign + zi`,
/// with round-half-away-from-zero. Non-negative dimensions apply the formula
/// to the raw value.
pub fn discretize_log(value: f64, dim: &LogDim) -> i32 {
    let index = if dim.signed {
        let mag = ((value.abs() + dim.sf) / dim.sf).ln() / dim.cr.ln();
        dim.zi as f64 + value.signum() * mag.round()
    } else {
        let arg = (value + dim.sf) / dim.sf;
        if arg <= 0.0 {
            return i32::MIN;
        }
        dim.zi as f64 + (arg.ln() / dim.cr.ln()).round()
    };
    // Saturating cast keeps absurd values representable as plain
    // out-of-bounds indices.
    index as i32
}

/// Linear discretization: `round(v / cd) + zi`, round-half-away-from-zero.
pub fn discretize_lin(value: f64, dim: &LinDim) -> i32 {
    (dim.zi as f64 + (value / dim.cd).round()) as i32
}

/// Representative value of a log-dimension index (inverse of
/// [`discretize_log`] at cell centers).
pub fn undiscretize_log(index: i32, dim: &LogDim) -> Result<f64, TltError> {
    check_bounds(index, dim.min, dim.max, "log")?;
    let off = (index - dim.zi) as f64;
    Ok(if dim.signed {
        off.signum() * dim.sf * (dim.cr.powf(off.abs()) - 1.0)
    } else {
        dim.sf * (dim.cr.powf(off) - 1.0)
    })
}

/// Representative value of a linear-dimension index.
pub fn undiscretize_lin(index: i32, dim: &LinDim) -> Result<f64, TltError> {
    check_bounds(index, dim.min, dim.max, "linear")?;
    Ok((index - dim.zi) as f64 * dim.cd)
}

fn check_bounds(index: i32, min: i32, max: i32, dim: &'static str) -> Result<(), TltError> {
    if index < min || index > max {
        Err(TltError::IndexOutOfBounds { dim, index, min, max })
    } else {
        Ok(())
    }
}

/// Computes the continuous descriptors of a goal relative to a start state,
/// in the start state's frame.
pub fn get_td(x_o: &VehicleState, goal: &LanePose) -> TrajectoryDescriptors {
    let dx = goal.x - x_o.x;
    let dy = goal.y - x_o.y;
    let range = (dx * dx + dy * dy).sqrt();
    let bearing = if range > 0.0 { wrap_angle(dy.atan2(dx) - x_o.theta) } else { 0.0 };
    TrajectoryDescriptors {
        range,
        bearing,
        heading: wrap_angle(goal.theta - x_o.theta),
        velocity: x_o.v,
        steering: x_o.phi,
    }
}

/// Discretizes descriptors; `None` when any index falls outside its bounds.
pub fn get_dtd(td: &TrajectoryDescriptors, spec: &DiscretizationSpec) -> Option<DiscreteDescriptors> {
    let d = DiscreteDescriptors {
        range: discretize_log(td.range, &spec.range),
        bearing: discretize_lin(td.bearing, &spec.bearing),
        heading: discretize_log(td.heading, &spec.heading),
        velocity: discretize_log(td.velocity, &spec.velocity),
        steering: discretize_log(td.steering, &spec.steering),
    };
    let ok = |i: i32, min: i32, max: i32| i >= min && i <= max;
    (ok(d.range, spec.range.min, spec.range.max)
        && ok(d.bearing, spec.bearing.min, spec.bearing.max)
        && ok(d.heading, spec.heading.min, spec.heading.max)
        && ok(d.velocity, spec.velocity.min, spec.velocity.max)
        && ok(d.steering, spec.steering.min, spec.steering.max))
    .then_some(d)
}

/// Total trajectory time assigned to a sample by its goal range.
pub fn sample_total_time(range: f64) -> f64 {
    if range > 7.0 {
        5.0
    } else if range > 3.5 {
        2.5
    } else {
        2.0
    }
}

/// Acceleration from the equation of motion `range = v0 t + a t^2 / 2`.
pub fn motion_equation_accel(range: f64, v0: f64, total_time: f64) -> f64 {
    (range - v0 * total_time) / (total_time * total_time / 2.0)
}

/// Seed sample for one table generation step: total time from the range rule
/// and the acceleration that covers the range in that time.
pub struct TcpSample {
    pub total_time: f64,
    pub k2: f64,
    pub k3: f64,
    pub accel: f64,
}

pub fn tcp_sample_and_acc(
    range_index: i32,
    velocity_index: i32,
    k2: f64,
    k3: f64,
    spec: &DiscretizationSpec,
) -> Result<TcpSample, TltError> {
    let range = undiscretize_log(range_index, &spec.range)?;
    let v0 = undiscretize_log(velocity_index, &spec.velocity)?;
    let total_time = sample_total_time(range);
    Ok(TcpSample { total_time, k2, k3, accel: motion_equation_accel(range, v0, total_time) })
}

/// Stored seed: total time and the two outer knots. The first knot is never
/// stored; it is reconstructed at lookup time from the live steering angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedRecord {
    pub total_time: f64,
    pub k2: f64,
    pub k3: f64,
}

/// Dense 5-D table of optional seed records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLookupTable {
    spec: DiscretizationSpec,
    cells: Vec<Option<SeedRecord>>,
}

/// Outcome of a seed lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeedLookup {
    /// The addressed cell held a seed.
    Exact(TrajectoryControlParams),
    /// The cell was empty; the seed comes from the nearest occupied cell at
    /// this Chebyshev index distance.
    Neighbor(TrajectoryControlParams, u32),
    /// The whole table is empty.
    Miss,
}

impl TrajectoryLookupTable {
    pub fn new(spec: DiscretizationSpec) -> Self {
        let cells = vec![None; spec.total_cells()];
        Self { spec, cells }
    }

    pub fn spec(&self) -> &DiscretizationSpec {
        &self.spec
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn total_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.occupied() as f64 / self.cells.len() as f64
    }

    pub fn get(&self, d: &DiscreteDescriptors) -> Result<Option<SeedRecord>, TltError> {
        let i = self
            .spec
            .linear_index(d)
            .ok_or(TltError::IndexOutOfBounds { dim: "cell", index: d.range, min: 0, max: 0 })?;
        Ok(self.cells[i])
    }

    pub fn set(&mut self, d: &DiscreteDescriptors, record: SeedRecord) -> Result<(), TltError> {
        let i = self
            .spec
            .linear_index(d)
            .ok_or(TltError::IndexOutOfBounds { dim: "cell", index: d.range, min: 0, max: 0 })?;
        self.cells[i] = Some(record);
        Ok(())
    }

    /// Iterates `(descriptors, record)` over occupied cells in index order.
    pub fn occupied_cells(&self) -> impl Iterator<Item = (DiscreteDescriptors, SeedRecord)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.map(|r| (self.spec.descriptors_of(i), r)))
    }

    /// Occupancy count per index along each dimension, table order.
    pub fn dimension_histograms(&self) -> [Vec<usize>; 5] {
        let dims = self.spec.dims();
        let mut hist = [
            vec![0usize; dims[0]],
            vec![0usize; dims[1]],
            vec![0usize; dims[2]],
            vec![0usize; dims[3]],
            vec![0usize; dims[4]],
        ];
        for (d, _) in self.occupied_cells() {
            hist[0][(d.range - self.spec.range.min) as usize] += 1;
            hist[1][(d.bearing - self.spec.bearing.min) as usize] += 1;
            hist[2][(d.heading - self.spec.heading.min) as usize] += 1;
            hist[3][(d.steering - self.spec.steering.min) as usize] += 1;
            hist[4][(d.velocity - self.spec.velocity.min) as usize] += 1;
        }
        hist
    }

    /// Looks up a seed for the addressed cell. `phi_o` is the live steering
    /// angle; the missing first knot is initialized by evaluating the
    /// three-knot spline through `(0, phi_o)`, `(tt/2, k2)`, `(tt, k3)` at
    /// `tt/4`, which leaves the seed's spline shape unchanged.
    pub fn lookup_seed(&self, d: &DiscreteDescriptors, phi_o: f64) -> Result<SeedLookup, TltError> {
        let idx = self
            .spec
            .linear_index(d)
            .ok_or(TltError::IndexOutOfBounds { dim: "cell", index: d.range, min: 0, max: 0 })?;
        if let Some(rec) = self.cells[idx] {
            return Ok(SeedLookup::Exact(seed_tcp(&rec, phi_o)));
        }
        let dims = self.spec.dims();
        let here = self.spec.descriptors_of(idx);
        let max_r = *dims.iter().max().unwrap() as i32;
        for radius in 1..=max_r {
            if let Some(rec) = self.nearest_in_shell(&here, radius) {
                return Ok(SeedLookup::Neighbor(seed_tcp(&rec, phi_o), radius as u32));
            }
        }
        Ok(SeedLookup::Miss)
    }

    /// First occupied cell on the Chebyshev shell at `radius`, scanning the
    /// shell box in lexicographic index order.
    fn nearest_in_shell(&self, center: &DiscreteDescriptors, radius: i32) -> Option<SeedRecord> {
        let c = [center.range, center.bearing, center.heading, center.steering, center.velocity];
        let lims = [
            (self.spec.range.min, self.spec.range.max),
            (self.spec.bearing.min, self.spec.bearing.max),
            (self.spec.heading.min, self.spec.heading.max),
            (self.spec.steering.min, self.spec.steering.max),
            (self.spec.velocity.min, self.spec.velocity.max),
        ];
        let lo: Vec<i32> = (0..5).map(|i| (c[i] - radius).max(lims[i].0)).collect();
        let hi: Vec<i32> = (0..5).map(|i| (c[i] + radius).min(lims[i].1)).collect();
        if (0..5).any(|i| lo[i] > hi[i]) {
            return None;
        }
        let mut cur = [lo[0], lo[1], lo[2], lo[3], lo[4]];
        loop {
            let on_shell = (0..5).any(|i| (cur[i] - c[i]).abs() == radius);
            if on_shell {
                let d = DiscreteDescriptors {
                    range: cur[0],
                    bearing: cur[1],
                    heading: cur[2],
                    steering: cur[3],
                    velocity: cur[4],
                };
                if let Some(i) = self.spec.linear_index(&d) {
                    if let Some(rec) = self.cells[i] {
                        return Some(rec);
                    }
                }
            }
            // Advance the 5-digit counter.
            let mut k = 4usize;
            loop {
                cur[k] += 1;
                if cur[k] <= hi[k] {
                    break;
                }
                cur[k] = lo[k];
                if k == 0 {
                    return None;
                }
                k -= 1;
            }
        }
    }
}

/// Reconstructs a full four-parameter seed from a stored record and the live
/// steering angle.
fn seed_tcp(rec: &SeedRecord, phi_o: f64) -> TrajectoryControlParams {
    let tt = rec.total_time;
    let spline =
        SteeringProfile::natural(&[0.0, tt / 2.0, tt], &[phi_o, rec.k2, rec.k3]).expect("tt > 0");
    TrajectoryControlParams::new(tt, spline.eval(tt / 4.0), rec.k2, rec.k3)
}

/// Counters from a table generation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FillReport {
    pub samples: usize,
    pub invalid_descriptors: usize,
    pub rejected: usize,
    pub stored: usize,
    pub occupied: usize,
    pub total_cells: usize,
}

impl FillReport {
    pub fn fill_fraction(&self) -> f64 {
        self.occupied as f64 / self.total_cells as f64
    }
}

/// Counters from a hole-filling run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoleFillReport {
    pub passes: usize,
    pub filled_per_pass: Vec<usize>,
    pub occupied: usize,
    pub total_cells: usize,
}

impl HoleFillReport {
    pub fn filled(&self) -> usize {
        self.filled_per_pass.iter().sum()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.occupied as f64 / self.total_cells as f64
    }
}

/// Options controlling table generation.
#[derive(Debug, Clone, PartialEq)]
pub struct TableBuildOptions {
    /// Spacing of the `k2`/`k3` sample grid over the steering range, radians.
    pub knot_step: f64,
    /// Optimizer budget for per-sample seed refinement. Tighter than the
    /// runtime defaults: narrow central cells need converged endpoints.
    pub optimizer: OptimizerOptions,
    /// Worker threads for the group scan; 0 means one per available core.
    pub threads: usize,
    /// Occupied neighbors tried per empty cell in each hole-filling attempt.
    pub hole_neighbor_cap: usize,
}

impl Default for TableBuildOptions {
    fn default() -> Self {
        Self {
            // 3 degrees; spans the default steering range in 21 samples.
            knot_step: 0.0524,
            optimizer: OptimizerOptions {
                max_iterations: 18,
                cost_tolerance: 0.02,
                line_search_max_evals: 10,
                ..OptimizerOptions::default()
            },
            threads: 0,
            hole_neighbor_cap: 4,
        }
    }
}

/// The canonical start state of a cell: the origin, with the cell's velocity
/// and steering representatives.
pub fn canonical_start(
    d: &DiscreteDescriptors,
    spec: &DiscretizationSpec,
) -> Result<VehicleState, TltError> {
    Ok(VehicleState::at_origin(
        undiscretize_log(d.velocity, &spec.velocity)?,
        undiscretize_log(d.steering, &spec.steering)?,
    ))
}

/// The goal a cell stands for: range/bearing/heading representatives in the
/// canonical frame.
pub fn cell_goal(
    d: &DiscreteDescriptors,
    spec: &DiscretizationSpec,
) -> Result<(f64, f64, f64), TltError> {
    let range = undiscretize_log(d.range, &spec.range)?;
    let bearing = undiscretize_lin(d.bearing, &spec.bearing)?;
    let heading = undiscretize_log(d.heading, &spec.heading)?;
    Ok((range, bearing, heading))
}

/// Simulates a stored seed from a cell's canonical start, with the
/// acceleration tied to the cell range by the equation of motion, and returns
/// the final state. This is the reference dynamics both table generation and
/// the self-consistency oracle use.
pub fn simulate_cell_seed(
    d: &DiscreteDescriptors,
    rec: &SeedRecord,
    spec: &DiscretizationSpec,
    params: &VehicleParams,
) -> Result<VehicleState, TltError> {
    let x_o = canonical_start(d, spec)?;
    let range = undiscretize_log(d.range, &spec.range)?;
    let tt = rec.total_time;
    let accel = motion_equation_accel(range, x_o.v, tt);
    let profile = SteeringProfile::natural(&[0.0, tt / 2.0, tt], &[x_o.phi, rec.k2, rec.k3])
        .expect("tt > 0");
    Ok(simulate_endpoint(&x_o, accel, &profile, tt, params))
}

/// Generates the lookup table: scans every (range, velocity, steering) index
/// group, samples `k2`/`k3` over the steering range, simulates each sample,
/// discretizes where it landed and refines the sample toward that cell's
/// representative goal. A refined seed is stored only if its endpoint
/// re-discretizes into the same cell; later results overwrite earlier ones.
///
/// Groups run in parallel; results merge in group order, so the outcome is
/// independent of thread count.
pub fn fill_table(
    spec: &DiscretizationSpec,
    params: &VehicleParams,
    weights: &CostWeights,
    options: &TableBuildOptions,
) -> (TrajectoryLookupTable, FillReport) {
    let mut table = TrajectoryLookupTable::new(*spec);
    let knots = knot_samples(params.phi_min, params.phi_max, options.knot_step);

    let mut groups = Vec::new();
    for ri in spec.range.min..=spec.range.max {
        for vi in spec.velocity.min..=spec.velocity.max {
            for si in spec.steering.min..=spec.steering.max {
                groups.push((ri, vi, si));
            }
        }
    }

    let run = |group: &(i32, i32, i32)| -> (Vec<(usize, SeedRecord)>, FillReport) {
        let (ri, vi, si) = *group;
        let mut out = Vec::new();
        let mut rep = FillReport::default();
        let v0 = undiscretize_log(vi, &spec.velocity).expect("group index in bounds");
        let phi0 = undiscretize_log(si, &spec.steering).expect("group index in bounds");
        let x_o = VehicleState::at_origin(v0, phi0);
        let range_target = undiscretize_log(ri, &spec.range).expect("group index in bounds");
        let tt = sample_total_time(range_target);
        let accel = motion_equation_accel(range_target, v0, tt);
        // Candidates per landed cell, in scan order. Since later valid
        // refinements overwrite earlier ones, trying each cell's candidates
        // in reverse until the first success yields the same table as
        // refining every sample, without the discarded work.
        let mut landed: std::collections::HashMap<usize, Vec<(f64, f64)>> =
            std::collections::HashMap::new();
        for &k2 in &knots {
            for &k3 in &knots {
                rep.samples += 1;
                let profile = SteeringProfile::natural(&[0.0, tt / 2.0, tt], &[phi0, k2, k3])
                    .expect("tt > 0");
                let fin = simulate_endpoint(&x_o, accel, &profile, tt, params);
                let td = td_of_final(&x_o, &fin);
                let Some(dtd) = get_dtd(&td, spec) else {
                    rep.invalid_descriptors += 1;
                    continue;
                };
                landed.entry(spec.linear_index(&dtd).unwrap()).or_default().push((k2, k3));
            }
        }
        let mut cells: Vec<usize> = landed.keys().copied().collect();
        cells.sort_unstable();
        for idx in cells {
            let cell = spec.descriptors_of(idx);
            let mut found = None;
            for &(k2, k3) in landed[&idx].iter().rev() {
                match refine_seed(&cell, tt, k2, k3, spec, params, weights, &options.optimizer) {
                    Some(rec) => {
                        found = Some(rec);
                        break;
                    }
                    None => rep.rejected += 1,
                }
            }
            if let Some(rec) = found {
                out.push((idx, rec));
                rep.stored += 1;
            }
        }
        (out, rep)
    };

    let results: Vec<(Vec<(usize, SeedRecord)>, FillReport)> =
        in_pool(options.threads, || groups.par_iter().map(run).collect());

    let mut report = FillReport::default();
    for (writes, rep) in results {
        report.samples += rep.samples;
        report.invalid_descriptors += rep.invalid_descriptors;
        report.rejected += rep.rejected;
        report.stored += rep.stored;
        for (idx, rec) in writes {
            table.cells[idx] = Some(rec);
        }
    }
    report.total_cells = table.total_cells();
    report.occupied = table.occupied();
    (table, report)
}

/// Fills empty cells from occupied neighbors, repeating until a pass fills
/// nothing. Each pass reads only the table state from the start of the pass,
/// so passes parallelize without affecting the result.
pub fn fill_holes(
    table: &mut TrajectoryLookupTable,
    params: &VehicleParams,
    weights: &CostWeights,
    options: &TableBuildOptions,
) -> HoleFillReport {
    let spec = *table.spec();
    let mut report = HoleFillReport::default();
    // Cells whose occupied-neighbor count is unchanged since their last
    // failed attempt are skipped; the attempt is deterministic, so the
    // outcome cannot change until a new neighbor appears.
    let mut last_failed_count: Vec<u16> = vec![u16::MAX; table.total_cells()];

    loop {
        report.passes += 1;
        let candidates: Vec<(usize, Vec<SeedRecord>)> = table
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_none())
            .filter_map(|(i, _)| {
                let here = spec.descriptors_of(i);
                let neighbors = occupied_neighbors(table, &here);
                if neighbors.is_empty() || neighbors.len() as u16 == last_failed_count[i] {
                    None
                } else {
                    Some((i, neighbors))
                }
            })
            .collect();
        if candidates.is_empty() {
            report.filled_per_pass.push(0);
            break;
        }

        let fills: Vec<(usize, usize, Option<SeedRecord>)> = in_pool(options.threads, || {
            candidates
                .par_iter()
                .map(|(i, neighbors)| {
                    let here = spec.descriptors_of(*i);
                    let found = neighbors.iter().take(options.hole_neighbor_cap).find_map(|rec| {
                        refine_seed(
                            &here,
                            rec.total_time,
                            rec.k2,
                            rec.k3,
                            &spec,
                            params,
                            weights,
                            &options.optimizer,
                        )
                    });
                    (*i, neighbors.len(), found)
                })
                .collect()
        });

        let mut filled = 0usize;
        for (i, ncount, rec) in fills {
            match rec {
                Some(r) => {
                    table.cells[i] = Some(r);
                    filled += 1;
                }
                None => last_failed_count[i] = ncount as u16,
            }
        }
        report.filled_per_pass.push(filled);
        if filled == 0 {
            break;
        }
    }
    report.occupied = table.occupied();
    report.total_cells = table.total_cells();
    report
}

/// Occupied cells within Chebyshev distance 1, in lexicographic offset order.
fn occupied_neighbors(
    table: &TrajectoryLookupTable,
    center: &DiscreteDescriptors,
) -> Vec<SeedRecord> {
    let spec = table.spec();
    let mut out = Vec::new();
    for dr in -1..=1 {
        for db in -1..=1 {
            for dh in -1..=1 {
                for ds in -1..=1 {
                    for dv in -1..=1 {
                        if dr == 0 && db == 0 && dh == 0 && ds == 0 && dv == 0 {
                            continue;
                        }
                        let d = DiscreteDescriptors {
                            range: center.range + dr,
                            bearing: center.bearing + db,
                            heading: center.heading + dh,
                            steering: center.steering + ds,
                            velocity: center.velocity + dv,
                        };
                        if let Some(i) = spec.linear_index(&d) {
                            if let Some(rec) = table.cells[i] {
                                out.push(rec);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Refines a candidate `(tt, k2, k3)` toward a cell's representative goal and
/// returns a record only when the refined endpoint re-discretizes into the
/// cell. The acceleration inside the objective follows the equation of
/// motion against the cell range, so the stored seed replays identically
/// from the cell's canonical start.
#[allow(clippy::too_many_arguments)]
fn refine_seed(
    cell: &DiscreteDescriptors,
    tt: f64,
    k2: f64,
    k3: f64,
    spec: &DiscretizationSpec,
    params: &VehicleParams,
    weights: &CostWeights,
    opts: &OptimizerOptions,
) -> Option<SeedRecord> {
    let x_o = canonical_start(cell, spec).ok()?;
    let (range, bearing, heading) = cell_goal(cell, spec).ok()?;
    let goal_xy = (range * bearing.cos(), range * bearing.sin());
    let v0 = x_o.v;
    let phi0 = x_o.phi;
    let objective = move |p: &[f64]| -> f64 {
        let (tt, k2, k3) = (p[0], p[1], p[2]);
        let accel = motion_equation_accel(range, v0, tt);
        let profile = match SteeringProfile::natural(&[0.0, tt / 2.0, tt], &[phi0, k2, k3]) {
            Ok(pr) => pr,
            Err(_) => return f64::INFINITY,
        };
        let fin = simulate_endpoint(&x_o, accel, &profile, tt, params);
        goal_terms_cost(&x_o, goal_xy, heading, &fin, weights)
    };

    let lo = [opts.tt_bounds.0, opts.knot_bounds.0, opts.knot_bounds.0];
    let hi = [opts.tt_bounds.1, opts.knot_bounds.1, opts.knot_bounds.1];
    let steps = [opts.fd_step_tt, opts.fd_step_knot, opts.fd_step_knot];
    let scales = [1.0, 0.1, 0.1];
    let seed = [tt.clamp(lo[0], hi[0]), k2.clamp(lo[1], hi[1]), k3.clamp(lo[2], hi[2])];

    // Probe stage: a few iterations decide whether this cell is worth the
    // full budget. Unreachable cells dominate generation time otherwise.
    let probe_opts = OptimizerOptions { max_iterations: 3, ..*opts };
    let probe = minimize_bounded(&objective, &seed, &lo, &hi, &steps, &scales, &probe_opts);
    if probe.status == OptimStatus::Invalid {
        return None;
    }
    let seed_cost = probe.initial_cost;
    let result = if probe.cost < opts.cost_tolerance {
        probe
    } else if probe.cost < seed_cost * 0.75 || probe.cost < seed_cost - 0.05 {
        let rest = OptimizerOptions {
            max_iterations: opts.max_iterations.saturating_sub(3).max(1),
            ..*opts
        };
        minimize_bounded(&objective, &probe.x, &lo, &hi, &steps, &scales, &rest)
    } else {
        return None;
    };

    if !result.cost.is_finite() {
        return None;
    }
    let rec = SeedRecord { total_time: result.x[0], k2: result.x[1], k3: result.x[2] };
    let fin = simulate_cell_seed(cell, &rec, spec, params).ok()?;
    let x_start = canonical_start(cell, spec).ok()?;
    let td = td_of_final(&x_start, &fin);
    match get_dtd(&td, spec) {
        Some(landed) if landed == *cell => Some(rec),
        _ => None,
    }
}

/// Descriptors of a simulated endpoint relative to the start state.
fn td_of_final(x_o: &VehicleState, fin: &VehicleState) -> TrajectoryDescriptors {
    get_td(x_o, &LanePose { x: fin.x, y: fin.y, theta: fin.theta, v: fin.v })
}

/// Evenly spaced knot samples covering `[lo, hi]`, endpoints included.
fn knot_samples(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "knot step must be positive");
    let n = ((hi - lo) / step).round().max(1.0) as usize + 1;
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn in_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        job()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(job)
    }
}

// ------------------------------------------------------------------
// Persistence
// ------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MPLANTLT";
const FORMAT_VERSION: u32 = 1;

impl TrajectoryLookupTable {
    /// Serializes the table: magic, format version, discretization
    /// parameters, dimension sizes, then the occupied cells. Round-trips
    /// bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), TltError> {
        let mut buf = Vec::with_capacity(64 + self.occupied() * 32);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_spec(&mut buf, &self.spec);
        for d in self.spec.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let entries: Vec<(usize, SeedRecord)> =
            self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|r| (i, r))).collect();
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (i, r) in entries {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
            buf.extend_from_slice(&r.total_time.to_le_bytes());
            buf.extend_from_slice(&r.k2.to_le_bytes());
            buf.extend_from_slice(&r.k3.to_le_bytes());
        }
        std::fs::write(path, buf)
            .map_err(|e| TltError::Io { path: path.display().to_string(), source: e })
    }

    /// Loads a table file, validating structure but accepting any
    /// discretization parameters. Use [`TrajectoryLookupTable::load_checked`]
    /// when the parameters must match a configured spec.
    pub fn load(path: &Path) -> Result<Self, TltError> {
        let io_err = |e| TltError::Io { path: path.display().to_string(), source: e };
        let bad = |reason: &str| TltError::BadFile {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut f = std::fs::File::open(path).map_err(io_err)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(io_err)?;
        let mut r = Cursor { buf: &buf, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("not a lookup table file"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let spec = read_spec(&mut r).ok_or_else(|| bad("bad discretization spec block"))?;
        let dims = spec.dims();
        for expect in dims {
            let got = r.u64().ok_or_else(|| bad("truncated dimension sizes"))? as usize;
            if got != expect {
                return Err(bad("dimension sizes disagree with the spec"));
            }
        }
        let total = spec.total_cells();
        let count = r.u64().ok_or_else(|| bad("truncated cell count"))? as usize;
        if count > total {
            return Err(bad("more entries than cells"));
        }
        let mut cells = vec![None; total];
        let mut prev: Option<u64> = None;
        for _ in 0..count {
            let idx = r.u64().ok_or_else(|| bad("truncated entry"))?;
            if idx as usize >= total {
                return Err(bad("entry index out of range"));
            }
            if prev.is_some_and(|p| idx <= p) {
                return Err(bad("entry indices out of order"));
            }
            prev = Some(idx);
            let total_time = r.f64().ok_or_else(|| bad("truncated entry"))?;
            let k2 = r.f64().ok_or_else(|| bad("truncated entry"))?;
            let k3 = r.f64().ok_or_else(|| bad("truncated entry"))?;
            cells[idx as usize] = Some(SeedRecord { total_time, k2, k3 });
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after the last entry"));
        }
        Ok(Self { spec, cells })
    }

    /// Loads a table and rejects it unless its discretization parameters
    /// equal the expected ones.
    pub fn load_checked(path: &Path, expected: &DiscretizationSpec) -> Result<Self, TltError> {
        let t = Self::load(path)?;
        if t.spec != *expected {
            return Err(TltError::SpecMismatch { path: path.display().to_string() });
        }
        Ok(t)
    }
}

fn write_spec(buf: &mut Vec<u8>, spec: &DiscretizationSpec) {
    let log = |buf: &mut Vec<u8>, d: &LogDim| {
        buf.push(if d.signed { 1 } else { 0 });
        buf.extend_from_slice(&d.cr.to_le_bytes());
        buf.extend_from_slice(&d.sf.to_le_bytes());
        buf.extend_from_slice(&(d.zi as i64).to_le_bytes());
        buf.extend_from_slice(&(d.min as i64).to_le_bytes());
        buf.extend_from_slice(&(d.max as i64).to_le_bytes());
    };
    log(buf, &spec.range);
    buf.push(2);
    buf.extend_from_slice(&spec.bearing.cd.to_le_bytes());
    buf.extend_from_slice(&0f64.to_le_bytes());
    buf.extend_from_slice(&(spec.bearing.zi as i64).to_le_bytes());
    buf.extend_from_slice(&(spec.bearing.min as i64).to_le_bytes());
    buf.extend_from_slice(&(spec.bearing.max as i64).to_le_bytes());
    log(buf, &spec.heading);
    log(buf, &spec.steering);
    log(buf, &spec.velocity);
}

fn read_spec(r: &mut Cursor) -> Option<DiscretizationSpec> {
    fn log_dim(r: &mut Cursor) -> Option<LogDim> {
        let kind = r.u8()?;
        if kind > 1 {
            return None;
        }
        Some(LogDim {
            signed: kind == 1,
            cr: r.f64()?,
            sf: r.f64()?,
            zi: r.i64()? as i32,
            min: r.i64()? as i32,
            max: r.i64()? as i32,
        })
    }
    let range = log_dim(r)?;
    if r.u8()? != 2 {
        return None;
    }
    let cd = r.f64()?;
    let _pad = r.f64()?;
    let bearing = LinDim { cd, zi: r.i64()? as i32, min: r.i64()? as i32, max: r.i64()? as i32 };
    let heading = log_dim(r)?;
    let steering = log_dim(r)?;
    let velocity = log_dim(r)?;
    Some(DiscretizationSpec { range, bearing, heading, steering, velocity })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }

    fn i64(&mut self) -> Option<i64> {
        self.take(8).map(|s| i64::from_le_bytes(s.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|s| f64::from_le_bytes(s.try_into().unwrap()))
    }
}
