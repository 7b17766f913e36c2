//! Command-line interface: table building and inspection, single-shot
//! planning, closed-loop simulation and log export.
//!
//! Exit codes: 0 on success, 1 when planning itself failed (no trajectory,
//! or a simulation stopped by the failure monitor), 2 on usage or I/O
//! errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::planner::{compute_motion_plan, PlanRequest, SeedProvenance};
use crate::scenario::{self, Scenario};
use crate::sim::{export_run, load_log, run_closed_loop, save_log, RunMetrics};
use crate::tlt::{fill_holes, fill_table, TrajectoryLookupTable};
use crate::vehicle::VehicleState;
use crate::world::{select_goal, ClearanceField, Lane, OccupancyGrid};

#[derive(Parser)]
#[command(
    name = "mplan",
    version,
    about = "Model-predictive on-road motion planner and simulation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the trajectory lookup table and write it to a file.
    BuildTable {
        /// Output table path.
        #[arg(long)]
        out: PathBuf,
        /// Configuration file with parameter overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Knot sampling step in radians.
        #[arg(long)]
        knot_step: Option<f64>,
        /// Worker threads; 0 uses every available core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Skip the hole-filling passes after the sampling scan.
        #[arg(long)]
        skip_holes: bool,
    },
    /// Run the hole-filling passes on an existing table.
    FillHoles {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print fill statistics of a table file.
    InspectTable {
        #[arg(long)]
        table: PathBuf,
    },
    /// Plan a single trajectory and print the result.
    PlanOnce {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        lane: PathBuf,
        /// Start state as `x y theta v phi`.
        #[arg(long)]
        state: String,
        /// Goal horizon in seconds (defaults to the configured value).
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the trajectory as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a scenario closed-loop and write logs and metrics.
    Simulate {
        #[arg(long)]
        table: PathBuf,
        /// Built-in scenario name (straight, arc, s-curve, obstruction).
        #[arg(long)]
        scenario: Option<String>,
        /// Cruise velocity for generated scenarios, m/s.
        #[arg(long, default_value_t = 8.33)]
        cruise: f64,
        /// Map file for a custom scenario (with --lane).
        #[arg(long)]
        map: Option<PathBuf>,
        /// Lane file for a custom scenario (with --map).
        #[arg(long)]
        lane: Option<PathBuf>,
        /// Output directory for poses.csv, metrics.csv and run.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Simulation duration limit in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Re-export CSV files from a saved run log.
    Export {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI; returns the process exit code.
pub fn dispatch(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn run(command: Command) -> Result<u8, String> {
    match command {
        Command::BuildTable { out, config, knot_step, threads, skip_holes } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(ks) = knot_step {
                if !(ks > 0.0) {
                    return Err("knot step must be positive".to_string());
                }
                cfg.table.knot_step = ks;
            }
            cfg.table.threads = threads;
            println!(
                "building table: steering range [{}, {}] rad, knot step {} rad",
                cfg.vehicle.phi_min, cfg.vehicle.phi_max, cfg.table.knot_step
            );
            let (mut table, report) =
                fill_table(&cfg.spec, &cfg.vehicle, &cfg.weights, &cfg.table);
            println!(
                "sampling scan: {} samples, {} invalid descriptors, {} rejected, {}/{} cells occupied ({:.2}%)",
                report.samples,
                report.invalid_descriptors,
                report.rejected,
                report.occupied,
                report.total_cells,
                100.0 * report.fill_fraction()
            );
            if !skip_holes {
                let holes = fill_holes(&mut table, &cfg.vehicle, &cfg.weights, &cfg.table);
                println!(
                    "hole filling: {} passes, {} cells filled, fill fraction {:.2}%",
                    holes.passes,
                    holes.filled(),
                    100.0 * holes.fill_fraction()
                );
            }
            table.save(&out).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::FillHoles { table, out, config, threads } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.table.threads = threads;
            let mut t =
                TrajectoryLookupTable::load_checked(&table, &cfg.spec).map_err(|e| e.to_string())?;
            let report = fill_holes(&mut t, &cfg.vehicle, &cfg.weights, &cfg.table);
            println!(
                "hole filling: {} passes, {} cells filled, fill fraction {:.2}%",
                report.passes,
                report.filled(),
                100.0 * report.fill_fraction()
            );
            t.save(&out).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::InspectTable { table } => {
            let t = TrajectoryLookupTable::load(&table).map_err(|e| e.to_string())?;
            println!(
                "table {}: {}/{} cells occupied, fill fraction {:.4}",
                table.display(),
                t.occupied(),
                t.total_cells(),
                t.fill_fraction()
            );
            let dims = t.spec().dims();
            let names = ["range", "bearing", "heading", "steering", "velocity"];
            let hist = t.dimension_histograms();
            for (k, name) in names.iter().enumerate() {
                let counts: Vec<String> = hist[k].iter().map(|c| c.to_string()).collect();
                println!("{name} ({} slices): {}", dims[k], counts.join(" "));
            }
            Ok(0)
        }
        Command::PlanOnce { table, map, lane, state, horizon, config, csv } => {
            let cfg = load_config(config.as_deref())?;
            let t =
                TrajectoryLookupTable::load_checked(&table, &cfg.spec).map_err(|e| e.to_string())?;
            let grid = OccupancyGrid::load(&map).map_err(|e| e.to_string())?;
            let mut lane = Lane::load(&lane).map_err(|e| e.to_string())?;
            let x_o = parse_state(&state)?;
            let field = ClearanceField::build(&grid);
            let (_, goal_index) = select_goal(&lane, &x_o, horizon.unwrap_or(cfg.horizon_s));
            lane.goal_index = goal_index;
            let request = PlanRequest { x_o, lane: &lane, field: &field };
            let result = compute_motion_plan(&request, &t, &cfg.planner_config(), &cfg.vehicle);
            println!("goal: lane index {goal_index} at ({}, {})", lane.goal().x, lane.goal().y);
            println!("seed: {}", provenance_text(result.seed_provenance));
            println!("elapsed: {:.3} ms, iterations: {}", result.elapsed_ms, result.iterations);
            if result.is_failure() {
                println!("plan: FAILED ({:?})", result.failure.unwrap());
                return Ok(1);
            }
            let tcp = result.tcp.unwrap();
            println!(
                "tcp: tt={:.4} s, knots=[{:.4}, {:.4}, {:.4}] rad, accel={:.4} m/s^2",
                tcp.total_time,
                tcp.knots[0],
                tcp.knots[1],
                tcp.knots[2],
                result.accel.unwrap()
            );
            let b = result.cost.unwrap();
            println!(
                "cost: total={:.4} (range_err={:.4} m, heading_err={:.4} rad, bearing_err={:.4} rad, obstacle={:.4} m, lane={:.4} m)",
                b.total, b.delta_lambda, b.delta_theta, b.delta_phi_bearing, b.d_obstacle, b.d_lane
            );
            let fin = result.trajectory.final_state().unwrap();
            println!(
                "trajectory: {} states, final pose ({:.3}, {:.3}, {:.4}) at v={:.3} m/s",
                result.trajectory.len(),
                fin.x,
                fin.y,
                fin.theta,
                fin.v
            );
            if let Some(csv_path) = csv {
                write_trajectory_csv(&result.trajectory.states, &csv_path)?;
                println!("wrote {}", csv_path.display());
            }
            Ok(0)
        }
        Command::Simulate { table, scenario: name, cruise, map, lane, out, config, duration } => {
            let cfg = load_config(config.as_deref())?;
            let t =
                TrajectoryLookupTable::load_checked(&table, &cfg.spec).map_err(|e| e.to_string())?;
            let mut sc =
                build_scenario(name.as_deref(), cruise, map.as_deref(), lane.as_deref(), &cfg)?;
            if let Some(d) = duration {
                sc.duration_limit_s = d;
            }
            let (metrics, log) =
                run_closed_loop(&sc, &t, &cfg.sim_config()).map_err(|e| e.to_string())?;
            print_metrics(&sc, &metrics);
            std::fs::create_dir_all(&out)
                .map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            export_run(&log, &out).map_err(|e| e.to_string())?;
            save_log(&log, &out.join("run.json")).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(if log.stop == crate::sim::StopReason::ConsecutiveFailures { 1 } else { 0 })
        }
        Command::Export { log, out } => {
            let run_log = load_log(&log).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out)
                .map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            export_run(&run_log, &out).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, String> {
    match path {
        Some(p) => Config::load(p).map_err(|e| e.to_string()),
        None => Ok(Config::default()),
    }
}

fn parse_state(text: &str) -> Result<VehicleState, String> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad state component `{s}`: {e}")))
        .collect::<Result<_, _>>()?;
    if vals.len() != 5 {
        return Err("state must be five numbers: `x y theta v phi`".to_string());
    }
    Ok(VehicleState::new(vals[0], vals[1], vals[2], vals[3], vals[4], 0.0))
}

fn build_scenario(
    name: Option<&str>,
    cruise: f64,
    map: Option<&Path>,
    lane: Option<&Path>,
    cfg: &Config,
) -> Result<Scenario, String> {
    let mut sc = match (name, map, lane) {
        (Some(n), None, None) => scenario::by_name(n, cruise).ok_or_else(|| {
            format!("unknown scenario `{n}`; available: {}", scenario::SCENARIO_NAMES.join(", "))
        })?,
        (None, Some(map), Some(lane)) => {
            let grid = OccupancyGrid::load(map).map_err(|e| e.to_string())?;
            let lane = Lane::load(lane).map_err(|e| e.to_string())?;
            let p0 = lane.poses[0];
            Scenario {
                name: "custom".to_string(),
                initial: VehicleState::new(p0.x, p0.y, p0.theta, 0.0, 0.0, 0.0),
                grid,
                lane,
                cruise,
                replan_hz: cfg.replan_hz,
                horizon_s: cfg.horizon_s,
                duration_limit_s: 120.0,
            }
        }
        _ => {
            return Err(
                "pass either --scenario NAME or both --map FILE and --lane FILE".to_string()
            )
        }
    };
    sc.replan_hz = cfg.replan_hz;
    sc.horizon_s = cfg.horizon_s;
    Ok(sc)
}

fn print_metrics(sc: &Scenario, m: &RunMetrics) {
    println!("scenario: {}", sc.name);
    println!("cycles: {} over {:.2} s simulated", m.cycles, m.sim_time_s);
    println!("completion: {:.3}", m.completion);
    println!("cross-track error: mean {:.4} m, max {:.4} m", m.mean_cross_track, m.max_cross_track);
    println!(
        "cycle time: mean {:.2} ms, median {:.2} ms, p95 {:.2} ms, max {:.2} ms",
        m.mean_cycle_ms, m.median_cycle_ms, m.p95_cycle_ms, m.max_cycle_ms
    );
    println!("min clearance: {:.3} m", m.min_clearance);
    println!("failure cycles: {}", m.failure_cycles);
}

fn provenance_text(p: Option<SeedProvenance>) -> String {
    match p {
        Some(SeedProvenance::ExactCell) => "exact cell hit".to_string(),
        Some(SeedProvenance::NeighborFallback(d)) => {
            format!("neighbor fallback at index distance {d}")
        }
        Some(SeedProvenance::Miss) => "table miss".to_string(),
        None => "not reached (invalid descriptors)".to_string(),
    }
}

fn write_trajectory_csv(states: &[VehicleState], path: &Path) -> Result<(), String> {
    let mut out = String::from("t,x,y,theta,v,phi\n");
    for s in states {
        out.push_str(&format!("{},{},{},{},{},{}\n", s.t, s.x, s.y, s.theta, s.v, s.phi));
    }
    std::fs::write(path, out).map_err(|e| format!("cannot write {}: {e}", path.display()))
}
