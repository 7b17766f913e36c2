//! Harness configuration: a TOML file of optional overrides layered over
//! the built-in defaults. Every tunable the planner, optimizer, table
//! builder and simulator expose lives here.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::cost::CostWeights;
use crate::optim::OptimizerOptions;
use crate::planner::{PlannerConfig, ValidityThresholds};
use crate::sim::SimConfig;
use crate::tlt::{DiscretizationSpec, TableBuildOptions};
use crate::vehicle::VehicleParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("bad config {path}: {reason}")]
    Invalid { path: String, reason: String },
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub weights: CostWeights,
    pub d_min: f64,
    pub optimizer: OptimizerOptions,
    pub validity: ValidityThresholds,
    pub failure_limit: usize,
    pub horizon_s: f64,
    pub replan_hz: f64,
    pub table: TableBuildOptions,
    pub spec: DiscretizationSpec,
}

impl Default for Config {
    fn default() -> Self {
        let vehicle = VehicleParams::default();
        let mut optimizer = OptimizerOptions::default();
        optimizer.knot_bounds = (vehicle.phi_min, vehicle.phi_max);
        let mut table = TableBuildOptions::default();
        table.optimizer.knot_bounds = optimizer.knot_bounds;
        Self {
            vehicle,
            weights: CostWeights::default(),
            d_min: 1.0,
            optimizer,
            validity: ValidityThresholds::default(),
            failure_limit: 10,
            horizon_s: 5.0,
            replan_hz: 20.0,
            table,
            spec: DiscretizationSpec::default(),
        }
    }
}

impl Config {
    /// Loads overrides from a TOML file onto the defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let file: FileConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), reason: e.to_string() })?;
        let mut cfg = Config::default();
        file.apply(&mut cfg);
        cfg.validate()
            .map_err(|reason| ConfigError::Invalid { path: path.display().to_string(), reason })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.vehicle.validate()?;
        if !(self.d_min > 0.0) {
            return Err(format!("d_min must be positive, got {}", self.d_min));
        }
        if self.failure_limit == 0 {
            return Err("failure_limit must be at least 1".to_string());
        }
        if !(self.replan_hz > 0.0) || !(self.horizon_s > 0.0) {
            return Err("replan_hz and horizon_s must be positive".to_string());
        }
        let w = &self.weights;
        if [w.w1, w.w2, w.w3, w.w4, w.w5].iter().any(|v| *v < 0.0) {
            return Err("cost weights must be non-negative".to_string());
        }
        if w.w1 + w.w2 + w.w3 + w.w4 + w.w5 == 0.0 {
            return Err("at least one cost weight must be positive".to_string());
        }
        Ok(())
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            weights: self.weights,
            d_min: self.d_min,
            optimizer: self.optimizer,
            validity: self.validity,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            planner: self.planner_config(),
            params: self.vehicle,
            failure_limit: self.failure_limit,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    vehicle: Option<VehicleSection>,
    weights: Option<WeightsSection>,
    cost: Option<CostSection>,
    optimizer: Option<OptimizerSection>,
    validity: Option<ValiditySection>,
    planner: Option<PlannerSection>,
    table: Option<TableSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleSection {
    wheelbase: Option<f64>,
    understeer: Option<f64>,
    phi_min: Option<f64>,
    phi_max: Option<f64>,
    v_max: Option<f64>,
    dt: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsSection {
    w1: Option<f64>,
    w2: Option<f64>,
    w3: Option<f64>,
    w4: Option<f64>,
    w5: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSection {
    d_min: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerSection {
    max_iterations: Option<usize>,
    cost_tolerance: Option<f64>,
    step_tolerance: Option<f64>,
    fd_step_tt: Option<f64>,
    fd_step_knot: Option<f64>,
    line_search_max_evals: Option<usize>,
    tt_min: Option<f64>,
    tt_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValiditySection {
    max_range_error: Option<f64>,
    max_heading_error: Option<f64>,
    max_bearing_error: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlannerSection {
    failure_limit: Option<usize>,
    horizon_s: Option<f64>,
    replan_hz: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableSection {
    knot_step: Option<f64>,
    max_iterations: Option<usize>,
    cost_tolerance: Option<f64>,
    line_search_max_evals: Option<usize>,
    hole_neighbor_cap: Option<usize>,
    range: Option<LogDimSection>,
    bearing: Option<LinDimSection>,
    heading: Option<LogDimSection>,
    steering: Option<LogDimSection>,
    velocity: Option<LogDimSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogDimSection {
    cr: Option<f64>,
    sf: Option<f64>,
    zi: Option<i32>,
    min: Option<i32>,
    max: Option<i32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinDimSection {
    cd: Option<f64>,
    zi: Option<i32>,
    min: Option<i32>,
    max: Option<i32>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+) => {
        $(if let Some(v) = $src.$field { $dst.$field = v; })+
    };
}

impl FileConfig {
    fn apply(self, cfg: &mut Config) {
        if let Some(v) = self.vehicle {
            overlay!(cfg.vehicle, v, wheelbase, understeer, phi_min, phi_max, v_max, dt);
        }
        if let Some(w) = self.weights {
            overlay!(cfg.weights, w, w1, w2, w3, w4, w5);
        }
        if let Some(c) = self.cost {
            if let Some(d) = c.d_min {
                cfg.d_min = d;
            }
        }
        if let Some(o) = self.optimizer {
            overlay!(
                cfg.optimizer,
                o,
                max_iterations,
                cost_tolerance,
                step_tolerance,
                fd_step_tt,
                fd_step_knot,
                line_search_max_evals
            );
            if let Some(v) = o.tt_min {
                cfg.optimizer.tt_bounds.0 = v;
            }
            if let Some(v) = o.tt_max {
                cfg.optimizer.tt_bounds.1 = v;
            }
        }
        if let Some(v) = self.validity {
            overlay!(cfg.validity, v, max_range_error, max_heading_error, max_bearing_error);
        }
        if let Some(p) = self.planner {
            overlay!(cfg, p, failure_limit, horizon_s, replan_hz);
        }
        if let Some(t) = self.table {
            if let Some(v) = t.knot_step {
                cfg.table.knot_step = v;
            }
            if let Some(v) = t.max_iterations {
                cfg.table.optimizer.max_iterations = v;
            }
            if let Some(v) = t.cost_tolerance {
                cfg.table.optimizer.cost_tolerance = v;
            }
            if let Some(v) = t.line_search_max_evals {
                cfg.table.optimizer.line_search_max_evals = v;
            }
            if let Some(v) = t.hole_neighbor_cap {
                cfg.table.hole_neighbor_cap = v;
            }
            if let Some(d) = t.range {
                overlay!(cfg.spec.range, d, cr, sf, zi, min, max);
            }
            if let Some(d) = t.bearing {
                overlay!(cfg.spec.bearing, d, cd, zi, min, max);
            }
            if let Some(d) = t.heading {
                overlay!(cfg.spec.heading, d, cr, sf, zi, min, max);
            }
            if let Some(d) = t.steering {
                overlay!(cfg.spec.steering, d, cr, sf, zi, min, max);
            }
            if let Some(d) = t.velocity {
                overlay!(cfg.spec.velocity, d, cr, sf, zi, min, max);
            }
        }
        // Steering limits double as the optimizer's knot box; keep them in
        // lockstep with whatever the vehicle section set.
        cfg.optimizer.knot_bounds = (cfg.vehicle.phi_min, cfg.vehicle.phi_max);
        cfg.table.optimizer.knot_bounds = cfg.optimizer.knot_bounds;
        cfg.table.optimizer.fd_step_tt = cfg.optimizer.fd_step_tt;
        cfg.table.optimizer.fd_step_knot = cfg.optimizer.fd_step_knot;
        cfg.table.optimizer.tt_bounds = cfg.optimizer.tt_bounds;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mplan.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_config_gives_defaults() {
        let (_d, path) = write_config("");
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.vehicle.wheelbase, 2.625);
        assert_eq!(cfg.weights.w4, 50.0);
        assert_eq!(cfg.d_min, 1.0);
        assert_eq!(cfg.optimizer.max_iterations, 30);
        assert_eq!(cfg.spec.range.cr, 1.8);
    }

    #[test]
    fn overrides_apply_and_propagate() {
        let (_d, path) = write_config(
            r#"
[vehicle]
phi_max = 0.45
phi_min = -0.45
dt = 0.05

[weights]
w4 = 80.0

[cost]
d_min = 1.4

[optimizer]
max_iterations = 12
tt_max = 9.0

[planner]
failure_limit = 4

[table]
knot_step = 0.09
[table.range]
max = 7
"#,
        );
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.vehicle.dt, 0.05);
        assert_eq!(cfg.weights.w4, 80.0);
        assert_eq!(cfg.d_min, 1.4);
        assert_eq!(cfg.optimizer.max_iterations, 12);
        assert_eq!(cfg.optimizer.tt_bounds.1, 9.0);
        assert_eq!(cfg.failure_limit, 4);
        assert_eq!(cfg.table.knot_step, 0.09);
        assert_eq!(cfg.spec.range.max, 7);
        // Knot boxes follow the steering limits.
        assert_eq!(cfg.optimizer.knot_bounds, (-0.45, 0.45));
        assert_eq!(cfg.table.optimizer.knot_bounds, (-0.45, 0.45));
        assert_eq!(cfg.table.optimizer.tt_bounds.1, 9.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, path) = write_config("[vehicle]\nwheelbse = 2.0\n");
        assert!(matches!(Config::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let (_d, path) = write_config("[cost]\nd_min = -1.0\n");
        assert!(matches!(Config::load(&path), Err(ConfigError::Invalid { .. })));
        let (_d, path) = write_config("[vehicle]\ndt = 0.0\n");
        assert!(matches!(Config::load(&path), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn infinite_velocity_ceiling_parses() {
        let (_d, path) = write_config("[vehicle]\nv_max = inf\n");
        let cfg = Config::load(&path).unwrap();
        assert!(cfg.vehicle.v_max.is_infinite());
    }
}
