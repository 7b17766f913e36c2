//! Conjugate-gradient minimization over the four trajectory control
//! parameters, with central finite-difference gradients and a backtracking
//! Armijo line search with expansion.

use thiserror::Error;

use crate::vehicle::TrajectoryControlParams;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at probe point {0:?}")]
    NonFiniteProbe([f64; 4]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// Stop as converged once the cost falls below this value.
    pub cost_tolerance: f64,
    /// Stop as stagnated once the relative parameter change per accepted
    /// step falls below this value.
    pub step_tolerance: f64,
    /// Finite-difference step for the total-time parameter, seconds.
    pub fd_step_tt: f64,
    /// Finite-difference step for the knot parameters, radians.
    pub fd_step_knot: f64,
    pub line_search_max_evals: usize,
    /// Total-time box during optimization; the model is meaningless outside.
    pub tt_bounds: (f64, f64),
    /// Knot box during optimization, normally the steering limits.
    pub knot_bounds: (f64, f64),
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            cost_tolerance: 0.05,
            step_tolerance: 1e-7,
            fd_step_tt: 0.01,
            fd_step_knot: 0.001,
            line_search_max_evals: 20,
            tt_bounds: (0.2, 15.0),
            knot_bounds: (-0.5236, 0.5236),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimStatus {
    /// Final cost fell below the cost tolerance.
    Converged,
    /// Iteration budget exhausted; the result is still the best point seen.
    MaxIterations,
    /// No further improvement found (step or line search collapsed).
    Stagnated,
    /// The seed violated its preconditions; nothing was optimized.
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationResult {
    pub tcp: TrajectoryControlParams,
    pub final_cost: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

/// Central-difference gradient of the objective at `tcp`, with per-parameter
/// steps. Probes are clamped to the parameter boxes, falling back to a
/// one-sided difference at an active bound.
pub fn numerical_gradient(
    objective: &dyn Fn(&TrajectoryControlParams) -> f64,
    tcp: &TrajectoryControlParams,
    opts: &OptimizerOptions,
) -> Result<[f64; 4], OptimError> {
    let x = tcp_to_vec(tcp);
    let (lo, hi) = boxes(opts);
    let steps = fd_steps(opts);
    let f = |v: &[f64]| objective(&vec_to_tcp(v));
    let mut grad = [0.0; 4];
    let g = gradient(&f, &x, &lo, &hi, &steps)
        .map_err(|p| OptimError::NonFiniteProbe([p[0], p[1], p[2], p[3]]))?;
    grad.copy_from_slice(&g);
    Ok(grad)
}

/// Minimizes the objective over `(tt, k1, k2, k3)` starting from `seed`,
/// never returning a point worse than the seed.
pub fn conjugate_gradient_minimize(
    objective: &dyn Fn(&TrajectoryControlParams) -> f64,
    seed: &TrajectoryControlParams,
    opts: &OptimizerOptions,
) -> OptimizationResult {
    if !(seed.total_time > 0.0)
        || seed.knots.iter().any(|k| {
            !k.is_finite() || *k < opts.knot_bounds.0 - 1e-12 || *k > opts.knot_bounds.1 + 1e-12
        })
    {
        return OptimizationResult {
            tcp: *seed,
            final_cost: f64::INFINITY,
            iterations: 0,
            status: OptimStatus::Invalid,
        };
    }
    let (lo, hi) = boxes(opts);
    let steps = fd_steps(opts);
    let f = |v: &[f64]| objective(&vec_to_tcp(v));
    let r = minimize_bounded(&f, &tcp_to_vec(seed), &lo, &hi, &steps, &TCP_SCALES, opts);
    OptimizationResult {
        tcp: vec_to_tcp(&r.x),
        final_cost: r.cost,
        iterations: r.iterations,
        status: r.status,
    }
}

/// Characteristic parameter magnitudes; the engine optimizes in these units
/// so seconds and radians get comparable step sizes.
const TCP_SCALES: [f64; 4] = [1.0, 0.1, 0.1, 0.1];

fn tcp_to_vec(tcp: &TrajectoryControlParams) -> Vec<f64> {
    vec![tcp.total_time, tcp.knots[0], tcp.knots[1], tcp.knots[2]]
}

fn vec_to_tcp(v: &[f64]) -> TrajectoryControlParams {
    TrajectoryControlParams::new(v[0], v[1], v[2], v[3])
}

fn boxes(opts: &OptimizerOptions) -> (Vec<f64>, Vec<f64>) {
    (
        vec![opts.tt_bounds.0, opts.knot_bounds.0, opts.knot_bounds.0, opts.knot_bounds.0],
        vec![opts.tt_bounds.1, opts.knot_bounds.1, opts.knot_bounds.1, opts.knot_bounds.1],
    )
}

fn fd_steps(opts: &OptimizerOptions) -> Vec<f64> {
    vec![opts.fd_step_tt, opts.fd_step_knot, opts.fd_step_knot, opts.fd_step_knot]
}

pub(crate) struct EngineResult {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Objective value at the (projected) start point.
    pub initial_cost: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

/// Finite-difference gradient in original units. Errors with the offending
/// probe point when the objective evaluates non-finite.
pub(crate) fn gradient(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    lo: &[f64],
    hi: &[f64],
    steps: &[f64],
) -> Result<Vec<f64>, Vec<f64>> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut probe = x.to_vec();
    for i in 0..n {
        let up = (x[i] + steps[i]).min(hi[i]);
        let dn = (x[i] - steps[i]).max(lo[i]);
        if up <= dn {
            g[i] = 0.0;
            continue;
        }
        probe[i] = up;
        let fu = f(&probe);
        if !fu.is_finite() {
            return Err(probe);
        }
        probe[i] = dn;
        let fd = f(&probe);
        if !fd.is_finite() {
            return Err(probe);
        }
        probe[i] = x[i];
        g[i] = (fu - fd) / (up - dn);
    }
    Ok(g)
}

/// Box-constrained Polak-Ribiere conjugate gradient with non-negative beta,
/// restarting the conjugate direction every `dim` iterations. The engine
/// works in scaled coordinates so heterogeneous parameter units behave.
pub(crate) fn minimize_bounded(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    fd_steps: &[f64],
    scales: &[f64],
    opts: &OptimizerOptions,
) -> EngineResult {
    let n = x0.len();
    let unscale = |z: &[f64]| -> Vec<f64> { z.iter().zip(scales).map(|(v, s)| v * s).collect() };
    let fz = |z: &[f64]| f(&unscale(z));
    let zlo: Vec<f64> = lo.iter().zip(scales).map(|(v, s)| v / s).collect();
    let zhi: Vec<f64> = hi.iter().zip(scales).map(|(v, s)| v / s).collect();
    let zsteps: Vec<f64> = fd_steps.iter().zip(scales).map(|(v, s)| v / s).collect();
    let project = |z: &mut [f64]| {
        for i in 0..n {
            z[i] = z[i].clamp(zlo[i], zhi[i]);
        }
    };

    let mut z: Vec<f64> = x0.iter().zip(scales).map(|(v, s)| v / s).collect();
    project(&mut z);
    let mut cost = fz(&z);
    let initial_cost = cost;
    if !cost.is_finite() {
        return EngineResult {
            x: unscale(&z),
            cost,
            initial_cost,
            iterations: 0,
            status: OptimStatus::Invalid,
        };
    }
    if cost < opts.cost_tolerance {
        return EngineResult {
            x: unscale(&z),
            cost,
            initial_cost,
            iterations: 0,
            status: OptimStatus::Converged,
        };
    }

    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;
    let mut grad = match gradient(&fz, &z, &zlo, &zhi, &zsteps) {
        Ok(g) => g,
        Err(_) => {
            return EngineResult {
                x: unscale(&z),
                cost,
                initial_cost,
                iterations: 0,
                status: OptimStatus::Stagnated,
            }
        }
    };
    let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut alpha_hint = 0.5;
    let mut steepest = true;

    for iter in 1..=opts.max_iterations {
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let dnorm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dnorm == 0.0 || !slope.is_finite() {
            status = OptimStatus::Stagnated;
            break;
        }
        let search = line_search(
            &fz,
            &z,
            cost,
            &dir,
            slope / dnorm,
            dnorm,
            &zlo,
            &zhi,
            alpha_hint,
            opts.line_search_max_evals,
        );
        let (znew, cnew, alpha) = match search {
            Some(hit) => hit,
            None => {
                if steepest {
                    status = OptimStatus::Stagnated;
                    break;
                }
                // Conjugate direction failed; retry along steepest descent.
                dir = grad.iter().map(|g| -g).collect();
                steepest = true;
                continue;
            }
        };
        iterations = iter;
        let step2: f64 = znew.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
        let base2: f64 = z.iter().map(|v| v * v).sum::<f64>().max(1.0);
        z = znew;
        cost = cnew;
        alpha_hint = (alpha * 2.0).clamp(0.01, 4.0);
        if cost < opts.cost_tolerance {
            status = OptimStatus::Converged;
            break;
        }
        // A vanishing step along steepest descent means a local floor; along
        // a conjugate direction it only argues for a restart.
        let tiny_step = (step2 / base2).sqrt() < opts.step_tolerance;
        if tiny_step && steepest {
            status = OptimStatus::Stagnated;
            break;
        }
        let gnew = match gradient(&fz, &z, &zlo, &zhi, &zsteps) {
            Ok(g) => g,
            Err(_) => {
                status = OptimStatus::Stagnated;
                break;
            }
        };
        // Polak-Ribiere with non-negativity reset; restart every n iterations.
        let beta = if iter % n == 0 || tiny_step {
            0.0
        } else {
            let gg: f64 = grad.iter().map(|g| g * g).sum();
            let num: f64 = gnew.iter().zip(&grad).map(|(a, b)| a * (a - b)).sum();
            if gg > 0.0 {
                (num / gg).max(0.0)
            } else {
                0.0
            }
        };
        dir = gnew.iter().zip(&dir).map(|(g, d)| -g + beta * d).collect();
        steepest = beta == 0.0;
        let descent: f64 = gnew.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if descent >= 0.0 {
            dir = gnew.iter().map(|g| -g).collect();
            steepest = true;
        }
        grad = gnew;
    }

    EngineResult { x: unscale(&z), cost, initial_cost, iterations, status }
}

/// Line search along `dir` from `z`, projecting trials onto the box.
///
/// Starts from a quadratic interpolation of the directional slope (exact for
/// quadratic objectives), then expands or backtracks, and polishes with
/// parabolic refinement while the evaluation budget lasts. Only strictly
/// improving points are accepted. Returns the accepted point, its cost and
/// the step length in unit-direction units.
#[allow(clippy::too_many_arguments)]
fn line_search(
    fz: &dyn Fn(&[f64]) -> f64,
    z: &[f64],
    cost0: f64,
    dir: &[f64],
    unit_slope: f64,
    dnorm: f64,
    zlo: &[f64],
    zhi: &[f64],
    alpha_init: f64,
    max_evals: usize,
) -> Option<(Vec<f64>, f64, f64)> {
    let trial = |alpha: f64| -> (Vec<f64>, f64) {
        let mut p: Vec<f64> = z
            .iter()
            .zip(dir)
            .map(|(zi, di)| zi + alpha * di / dnorm)
            .collect();
        for i in 0..p.len() {
            p[i] = p[i].clamp(zlo[i], zhi[i]);
        }
        let c = fz(&p);
        (p, c)
    };

    let mut evals = 0usize;
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(max_evals);
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let probe = |alpha: f64,
                     evals: &mut usize,
                     samples: &mut Vec<(f64, f64)>,
                     best: &mut Option<(Vec<f64>, f64, f64)>|
     -> f64 {
        let (p, c) = trial(alpha);
        *evals += 1;
        samples.push((alpha, c));
        if c.is_finite() && best.as_ref().map_or(c < cost0, |b| c < b.1) {
            *best = Some((p, c, alpha));
        }
        c
    };

    let a1 = alpha_init.max(1e-8);
    let c1 = probe(a1, &mut evals, &mut samples, &mut best);

    // Exact step under a quadratic model through (0, cost0) with the known
    // directional slope and the first probe.
    let denom = 2.0 * (c1 - cost0 - unit_slope * a1);
    if denom > 0.0 && evals < max_evals {
        let aq = (-unit_slope * a1 * a1 / denom).clamp(a1 * 1e-2, a1 * 1e2);
        if aq.is_finite() && aq > 0.0 && (aq - a1).abs() > 1e-12 * a1 {
            probe(aq, &mut evals, &mut samples, &mut best);
        }
    }

    if best.is_none() {
        // Nothing improved yet; backtrack from the smallest alpha probed.
        let mut a = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min) * 0.5;
        while evals < max_evals && a > 1e-14 {
            probe(a, &mut evals, &mut samples, &mut best);
            if best.is_some() {
                break;
            }
            a *= 0.5;
        }
        best.as_ref()?;
    }

    // Expand while the best point sits at the largest alpha probed.
    loop {
        if evals >= max_evals {
            break;
        }
        let a_best = best.as_ref().unwrap().2;
        let a_max = samples.iter().map(|s| s.0).fold(0.0, f64::max);
        if a_best < a_max {
            break;
        }
        let before = best.as_ref().unwrap().1;
        probe(a_best * 2.0, &mut evals, &mut samples, &mut best);
        if best.as_ref().unwrap().1 >= before {
            break;
        }
    }

    // Parabolic refinement around the best sample, a couple of rounds.
    for _ in 0..3 {
        if evals >= max_evals {
            break;
        }
        samples.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        samples.dedup_by(|a, b| a.0 == b.0);
        let a_best = best.as_ref().unwrap().2;
        let Some(k) = samples.iter().position(|&(sa, _)| sa == a_best) else { break };
        let (lo_s, hi_s) = match (k.checked_sub(1).map(|i| samples[i]), samples.get(k + 1)) {
            (Some(l), Some(h)) => (l, *h),
            (None, Some(h)) => ((0.0, cost0), *h),
            _ => break,
        };
        let mid = samples[k];
        let Some(am) = parabola_min(lo_s.0, lo_s.1, mid.0, mid.1, hi_s.0, hi_s.1) else { break };
        if !(am.is_finite() && am > lo_s.0 && am < hi_s.0 && (am - mid.0).abs() > 1e-14) {
            break;
        }
        let before = best.as_ref().unwrap().1;
        probe(am, &mut evals, &mut samples, &mut best);
        let after = best.as_ref().unwrap().1;
        if after >= before - 1e-18 {
            break;
        }
    }

    best
}

fn parabola_min(a0: f64, f0: f64, a1: f64, f1: f64, a2: f64, f2: f64) -> Option<f64> {
    if !(f0.is_finite() && f1.is_finite() && f2.is_finite()) {
        return None;
    }
    let d01 = (f1 - f0) / (a1 - a0);
    let d12 = (f2 - f1) / (a2 - a1);
    let second = (d12 - d01) / (a2 - a0);
    if second <= 0.0 {
        return None;
    }
    Some((a0 + a1) / 2.0 - d01 / (2.0 * second))
}
