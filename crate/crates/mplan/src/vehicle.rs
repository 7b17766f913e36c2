//! Kinematic vehicle model: bicycle kinematics with an understeer correction,
//! driven by a cubic steering-angle spline over the duration of a trajectory.

use thiserror::Error;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("total trajectory time must be positive, got {0}")]
    NonPositiveTotalTime(f64),
    #[error("steering angle {0} rad outside (-pi/2, pi/2)")]
    SteeringOutOfDomain(f64),
    #[error("spline knot {0} rad outside steering limits [{1}, {2}]")]
    KnotOutOfRange(f64, f64, f64),
    #[error("need at least 2 spline knots, got {0}")]
    TooFewKnots(usize),
}

/// Full vehicle state: pose, velocity, front-wheel steering angle, timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, wrapped to `(-pi, pi]`.
    pub theta: f64,
    /// Forward velocity in m/s.
    pub v: f64,
    /// Front-wheel steering angle in radians.
    pub phi: f64,
    /// Timestamp in seconds.
    pub t: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, phi: f64, t: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta), v, phi, t }
    }

    /// State at the origin with heading zero; the canonical frame used when
    /// generating lookup-table entries.
    pub fn at_origin(v: f64, phi: f64) -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0, v, phi, t: 0.0 }
    }
}

/// Physical parameters of the platform and the integration step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    /// Wheelbase in meters.
    pub wheelbase: f64,
    /// Understeer coefficient; reduces effective curvature at speed.
    pub understeer: f64,
    /// Steering limits in radians, `phi_min < 0 < phi_max < pi/2`.
    pub phi_min: f64,
    pub phi_max: f64,
    /// Velocity ceiling in m/s; may be infinite.
    pub v_max: f64,
    /// Integration step in seconds.
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            // Ford Escape class platform; the wheelbase is an assumption of
            // this harness, not a measured value.
            wheelbase: 2.625,
            understeer: 0.0015,
            phi_min: -0.5236,
            phi_max: 0.5236,
            // No velocity ceiling by default: the model equations carry none,
            // and lookup-table generation relies on unconstrained velocities
            // to populate long-range cells. Runtime velocities are bounded by
            // the lane profile instead.
            v_max: f64::INFINITY,
            dt: 0.025,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.wheelbase > 0.0) {
            return Err(format!("wheelbase must be positive, got {}", self.wheelbase));
        }
        if self.understeer < 0.0 {
            return Err(format!("understeer must be non-negative, got {}", self.understeer));
        }
        if !(self.phi_min < 0.0 && self.phi_max > 0.0) {
            return Err(format!(
                "steering limits must straddle zero, got [{}, {}]",
                self.phi_min, self.phi_max
            ));
        }
        if self.phi_max >= std::f64::consts::FRAC_PI_2 || self.phi_min <= -std::f64::consts::FRAC_PI_2 {
            return Err("steering limits must lie inside (-pi/2, pi/2)".to_string());
        }
        if !(self.dt > 0.0) {
            return Err(format!("integration step must be positive, got {}", self.dt));
        }
        Ok(())
    }
}

/// The trajectory control parameters the optimizer manipulates: total
/// trajectory time and the three steering-spline knot angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryControlParams {
    /// Total trajectory time in seconds.
    pub total_time: f64,
    /// Knot steering angles at `tt/4`, `tt/2` and `tt`.
    pub knots: [f64; 3],
}

impl TrajectoryControlParams {
    pub fn new(total_time: f64, k1: f64, k2: f64, k3: f64) -> Self {
        Self { total_time, knots: [k1, k2, k3] }
    }

    pub fn validate(&self, params: &VehicleParams) -> Result<(), VehicleError> {
        if !(self.total_time > 0.0) {
            return Err(VehicleError::NonPositiveTotalTime(self.total_time));
        }
        for &k in &self.knots {
            if !(params.phi_min..=params.phi_max).contains(&k) {
                return Err(VehicleError::KnotOutOfRange(k, params.phi_min, params.phi_max));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CubicSegment {
    /// Segment start time.
    t0: f64,
    /// Coefficients of `y0 + b u + c u^2 + d u^3` with `u = t - t0`.
    y0: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl CubicSegment {
    fn eval(&self, t: f64) -> f64 {
        let u = t - self.t0;
        self.y0 + u * (self.b + u * (self.c + u * self.d))
    }
}

/// Natural cubic spline of the steering angle over `[0, total_time]`.
///
/// Evaluation outside the knot span clamps to the endpoint values.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringProfile {
    knot_times: Vec<f64>,
    knot_angles: Vec<f64>,
    segments: Vec<CubicSegment>,
}

impl SteeringProfile {
    /// Builds a natural cubic spline (zero second derivative at both ends)
    /// through the given `(time, angle)` knots. Times must be strictly
    /// increasing.
    pub fn natural(times: &[f64], angles: &[f64]) -> Result<Self, VehicleError> {
        let n = times.len();
        assert_eq!(n, angles.len(), "knot times and angles must pair up");
        if n < 2 {
            return Err(VehicleError::TooFewKnots(n));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(VehicleError::NonPositiveTotalTime(w[1] - w[0]));
            }
        }

        // Second derivatives at the knots; natural boundary conditions pin
        // the first and last to zero, the interior ones come from the
        // standard tridiagonal system solved with the Thomas algorithm.
        let mut m = vec![0.0; n];
        if n > 2 {
            let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut lower = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                if i + 1 < k {
                    upper[i] = h[i + 1];
                }
                if i > 0 {
                    lower[i] = h[i];
                }
                rhs[i] = 6.0
                    * ((angles[i + 2] - angles[i + 1]) / h[i + 1]
                        - (angles[i + 1] - angles[i]) / h[i]);
            }
            for i in 1..k {
                let w = lower[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }

        let mut segments = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let h = times[i + 1] - times[i];
            segments.push(CubicSegment {
                t0: times[i],
                y0: angles[i],
                b: (angles[i + 1] - angles[i]) / h - h * (2.0 * m[i] + m[i + 1]) / 6.0,
                c: m[i] / 2.0,
                d: (m[i + 1] - m[i]) / (6.0 * h),
            });
        }
        Ok(Self { knot_times: times.to_vec(), knot_angles: angles.to_vec(), segments })
    }

    /// Steering angle at time `t`; clamps to the endpoint values outside the
    /// knot span.
    pub fn eval(&self, t: f64) -> f64 {
        let first = self.knot_times[0];
        let last = *self.knot_times.last().unwrap();
        if t <= first {
            return self.knot_angles[0];
        }
        if t >= last {
            return *self.knot_angles.last().unwrap();
        }
        // Few segments; a linear scan beats a binary search here.
        let mut idx = self.segments.len() - 1;
        for (i, seg) in self.segments.iter().enumerate().skip(1) {
            if t < seg.t0 {
                idx = i - 1;
                break;
            }
            idx = i;
        }
        self.segments[idx].eval(t)
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn knot_angles(&self) -> &[f64] {
        &self.knot_angles
    }

    pub fn total_time(&self) -> f64 {
        *self.knot_times.last().unwrap()
    }
}

/// Builds the steering profile for a trajectory: a natural cubic spline
/// through `(0, phi_o)`, `(tt/4, k1)`, `(tt/2, k2)` and `(tt, k3)`.
pub fn build_steering_profile(
    phi_o: f64,
    tcp: &TrajectoryControlParams,
) -> Result<SteeringProfile, VehicleError> {
    let tt = tcp.total_time;
    if !(tt > 0.0) {
        return Err(VehicleError::NonPositiveTotalTime(tt));
    }
    SteeringProfile::natural(
        &[0.0, tt / 4.0, tt / 2.0, tt],
        &[phi_o, tcp.knots[0], tcp.knots[1], tcp.knots[2]],
    )
}

/// Curvature commanded by a steering angle at a given speed:
/// `tan(phi) / wheelbase`, attenuated by `1 + understeer * v^2`.
pub fn curvature(phi: f64, v: f64, params: &VehicleParams) -> Result<f64, VehicleError> {
    if phi.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(VehicleError::SteeringOutOfDomain(phi));
    }
    Ok(curvature_unchecked(phi, v, params))
}

#[inline]
fn curvature_unchecked(phi: f64, v: f64, params: &VehicleParams) -> f64 {
    (phi.tan() / params.wheelbase) / (1.0 + params.understeer * v * v)
}

/// One explicit-Euler step of the kinematic model. The state timestamp is
/// interpreted as time relative to the start of `profile`.
pub fn step(
    state: &VehicleState,
    accel: f64,
    profile: &SteeringProfile,
    params: &VehicleParams,
) -> VehicleState {
    step_with_dt(state, accel, profile, params, params.dt)
}

fn step_with_dt(
    state: &VehicleState,
    accel: f64,
    profile: &SteeringProfile,
    params: &VehicleParams,
    dt: f64,
) -> VehicleState {
    let c = curvature_unchecked(state.phi, state.v, params);
    let t_next = state.t + dt;
    let (sin_t, cos_t) = state.theta.sin_cos();
    VehicleState {
        x: state.x + dt * state.v * cos_t,
        y: state.y + dt * state.v * sin_t,
        theta: wrap_angle(state.theta + dt * state.v * c),
        v: (state.v + dt * accel).clamp(0.0, params.v_max),
        phi: profile.eval(t_next).clamp(params.phi_min, params.phi_max),
        t: t_next,
    }
}

/// A simulated trajectory: states spaced `dt` apart, first state equal to the
/// start state. The empty trajectory is the planner's explicit failure value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
}

impl Trajectory {
    pub fn empty() -> Self {
        Self { states: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn final_state(&self) -> Option<&VehicleState> {
        self.states.last()
    }
}

/// Simulates the vehicle from `x_o` under constant acceleration and the
/// steering spline defined by `tcp`, producing `floor(tt/dt) + 1` states.
pub fn simulate_trajectory(
    x_o: &VehicleState,
    accel: f64,
    tcp: &TrajectoryControlParams,
    params: &VehicleParams,
) -> Result<Trajectory, VehicleError> {
    tcp.validate(params)?;
    let profile = build_steering_profile(x_o.phi, tcp)?;
    let steps = num_steps(tcp.total_time, params.dt);
    let mut states = Vec::with_capacity(steps + 1);
    // Spline time is trajectory-relative: rebase to t = 0, restore the
    // caller's timestamp offset on output.
    let t_offset = x_o.t;
    let mut s = VehicleState { t: 0.0, ..*x_o };
    states.push(VehicleState { t: t_offset, ..s });
    for _ in 0..steps {
        s = step(&s, accel, &profile, params);
        states.push(VehicleState { t: s.t + t_offset, ..s });
    }
    Ok(Trajectory { states })
}

/// Simulates as [`simulate_trajectory`] but keeps only the final state.
/// Used in the table-generation inner loop where intermediate poses are
/// never inspected.
pub fn simulate_final_state(
    x_o: &VehicleState,
    accel: f64,
    profile: &SteeringProfile,
    total_time: f64,
    params: &VehicleParams,
) -> VehicleState {
    let steps = num_steps(total_time, params.dt);
    let t_offset = x_o.t;
    let mut s = VehicleState { t: 0.0, ..*x_o };
    for _ in 0..steps {
        s = step(&s, accel, profile, params);
    }
    s.t += t_offset;
    s
}

/// State at exactly `total_time`: whole integration steps followed by one
/// fractional step covering the remainder.
///
/// The whole-step trajectory ends short of `total_time` by up to one step,
/// which makes any objective over its endpoint a staircase in the total
/// time; optimizing the total time needs this continuous endpoint instead.
pub fn simulate_endpoint(
    x_o: &VehicleState,
    accel: f64,
    profile: &SteeringProfile,
    total_time: f64,
    params: &VehicleParams,
) -> VehicleState {
    let steps = num_steps(total_time, params.dt);
    let t_offset = x_o.t;
    let mut s = VehicleState { t: 0.0, ..*x_o };
    for _ in 0..steps {
        s = step(&s, accel, profile, params);
    }
    let remainder = total_time - steps as f64 * params.dt;
    if remainder > 1e-12 {
        s = step_with_dt(&s, accel, profile, params, remainder);
    }
    s.t += t_offset;
    s
}

/// Discrete trajectory plus the exact-time endpoint, sharing one steering
/// profile construction.
pub fn simulate_trajectory_with_endpoint(
    x_o: &VehicleState,
    accel: f64,
    tcp: &TrajectoryControlParams,
    params: &VehicleParams,
) -> Result<(Trajectory, VehicleState), VehicleError> {
    tcp.validate(params)?;
    let profile = build_steering_profile(x_o.phi, tcp)?;
    let steps = num_steps(tcp.total_time, params.dt);
    let t_offset = x_o.t;
    let mut states = Vec::with_capacity(steps + 1);
    let mut s = VehicleState { t: 0.0, ..*x_o };
    states.push(VehicleState { t: t_offset, ..s });
    for _ in 0..steps {
        s = step(&s, accel, &profile, params);
        states.push(VehicleState { t: s.t + t_offset, ..s });
    }
    let remainder = tcp.total_time - steps as f64 * params.dt;
    let mut endpoint = s;
    if remainder > 1e-12 {
        endpoint = step_with_dt(&s, accel, &profile, params, remainder);
    }
    endpoint.t += t_offset;
    Ok((Trajectory { states }, endpoint))
}

#[inline]
fn num_steps(total_time: f64, dt: f64) -> usize {
    (total_time / dt + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-9;

    fn default_params() -> VehicleParams {
        VehicleParams::default()
    }

    /// Independent natural-spline oracle: assembles the full (n x n) system
    /// for the knot second derivatives and solves it by dense Gaussian
    /// elimination, then evaluates with the textbook two-sided formula.
    fn oracle_spline_eval(times: &[f64], values: &[f64], t: f64) -> f64 {
        let n = times.len();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = times[i] - times[i - 1];
            let h1 = times[i + 1] - times[i];
            a[i][i - 1] = h0;
            a[i][i] = 2.0 * (h0 + h1);
            a[i][i + 1] = h1;
            b[i] = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a[r][col].abs() > a[piv][col].abs() {
                    piv = r;
                }
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut m = vec![0.0; n];
        for r in (0..n).rev() {
            let mut s = b[r];
            for c in r + 1..n {
                s -= a[r][c] * m[c];
            }
            m[r] = s / a[r][r];
        }
        let mut i = n - 2;
        for seg in 0..n - 1 {
            if t <= times[seg + 1] {
                i = seg;
                break;
            }
        }
        let h = times[i + 1] - times[i];
        let u1 = times[i + 1] - t;
        let u0 = t - times[i];
        m[i] * u1.powi(3) / (6.0 * h)
            + m[i + 1] * u0.powi(3) / (6.0 * h)
            + (values[i] / h - m[i] * h / 6.0) * u1
            + (values[i + 1] / h - m[i + 1] * h / 6.0) * u0
    }

    #[test]
    fn constant_knots_give_constant_profile() {
        let tcp = TrajectoryControlParams::new(3.0, 0.1, 0.1, 0.1);
        let profile = build_steering_profile(0.1, &tcp).unwrap();
        for i in 0..=30 {
            let t = 3.0 * i as f64 / 30.0;
            assert!((profile.eval(t) - 0.1).abs() < TOL, "t = {t}");
        }
    }

    #[test]
    fn profile_passes_through_mid_knot() {
        let tcp = TrajectoryControlParams::new(4.0, 0.05, -0.12, 0.2);
        let profile = build_steering_profile(0.0, &tcp).unwrap();
        assert!((profile.eval(2.0) - (-0.12)).abs() < TOL);
    }

    #[test]
    fn profile_matches_independent_spline_oracle() {
        let tt = 4.0;
        let times = [0.0, tt / 4.0, tt / 2.0, tt];
        let values = [0.0, 0.1, 0.2, 0.3];
        let tcp = TrajectoryControlParams::new(tt, 0.1, 0.2, 0.3);
        let profile = build_steering_profile(0.0, &tcp).unwrap();
        for &t in &[0.3, 1.5, 2.7, 3.9] {
            let want = oracle_spline_eval(&times, &values, t);
            assert!(
                (profile.eval(t) - want).abs() < TOL,
                "t = {t}: got {}, oracle {want}",
                profile.eval(t)
            );
        }
    }

    #[test]
    fn profile_clamps_outside_span() {
        let tcp = TrajectoryControlParams::new(2.0, 0.1, 0.2, 0.3);
        let profile = build_steering_profile(0.05, &tcp).unwrap();
        assert_eq!(profile.eval(-1.0), 0.05);
        assert_eq!(profile.eval(5.0), 0.3);
    }

    #[test]
    fn non_positive_total_time_is_rejected() {
        let tcp = TrajectoryControlParams::new(0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            build_steering_profile(0.0, &tcp),
            Err(VehicleError::NonPositiveTotalTime(_))
        ));
    }

    #[test]
    fn curvature_zero_steering() {
        let p = default_params();
        assert_eq!(curvature(0.0, 3.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn curvature_matches_direct_evaluation() {
        let p = default_params();
        // tan(0.1) / 2.625
        let want_standstill = 0.1_f64.tan() / 2.625;
        assert!((curvature(0.1, 0.0, &p).unwrap() - want_standstill).abs() < 1e-12);
        assert!((want_standstill - 0.038223).abs() < 1e-6);
        // Understeer attenuation at 10 m/s: 1 + 0.0015 * 100 = 1.15.
        let want_moving = want_standstill / 1.15;
        assert!((curvature(0.1, 10.0, &p).unwrap() - want_moving).abs() < 1e-12);
        assert!((want_moving - 0.033237).abs() < 1e-6);
    }

    #[test]
    fn curvature_rejects_steering_outside_domain() {
        let p = default_params();
        assert!(curvature(std::f64::consts::FRAC_PI_2, 0.0, &p).is_err());
    }

    #[test]
    fn step_straight_line() {
        let p = VehicleParams { dt: 0.1, ..default_params() };
        let profile = SteeringProfile::natural(&[0.0, 1.0], &[0.0, 0.0]).unwrap();
        let s = step(&VehicleState::at_origin(2.0, 0.0), 0.0, &profile, &p);
        assert!((s.x - 0.2).abs() < TOL);
        assert!(s.y.abs() < TOL);
        assert!(s.theta.abs() < TOL);
        assert!((s.v - 2.0).abs() < TOL);
    }

    #[test]
    fn step_axis_aligned_heading() {
        let p = VehicleParams { dt: 0.1, ..default_params() };
        let profile = SteeringProfile::natural(&[0.0, 1.0], &[0.0, 0.0]).unwrap();
        let start = VehicleState::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 1.0, 0.0, 0.0);
        let s = step(&start, 0.0, &profile, &p);
        assert!((s.y - 0.1).abs() < TOL);
        assert!(s.x.abs() < 1e-12);
    }

    #[test]
    fn step_heading_advances_by_velocity_times_curvature() {
        let p = VehicleParams { dt: 0.1, ..default_params() };
        // Pick the steering angle that yields curvature 0.1 at v = 1.
        let c_target = 0.1;
        let phi = (c_target * p.wheelbase * (1.0 + p.understeer)).atan();
        let profile = SteeringProfile::natural(&[0.0, 1.0], &[phi, phi]).unwrap();
        let s = step(&VehicleState::at_origin(1.0, phi), 0.0, &profile, &p);
        assert!((s.theta - 0.01).abs() < 1e-12);
    }

    #[test]
    fn simulate_straight_line_displacement() {
        let p = VehicleParams { dt: 0.1, ..default_params() };
        let tcp = TrajectoryControlParams::new(2.0, 0.0, 0.0, 0.0);
        let t = simulate_trajectory(&VehicleState::at_origin(5.0, 0.0), 0.0, &tcp, &p).unwrap();
        assert_eq!(t.len(), 21);
        let f = t.final_state().unwrap();
        assert!((f.x - 10.0).abs() < TOL);
        assert!(f.y.abs() < TOL);
        assert!(f.theta.abs() < TOL);
    }

    #[test]
    fn simulate_reaches_goal_velocity_under_ramp() {
        let p = default_params();
        let (v0, vg, tt) = (3.0, 5.0, 2.0);
        let a = (vg - v0) / tt;
        let tcp = TrajectoryControlParams::new(tt, 0.0, 0.0, 0.0);
        let t = simulate_trajectory(&VehicleState::at_origin(v0, 0.0), a, &tcp, &p).unwrap();
        let f = t.final_state().unwrap();
        assert!((f.v - vg).abs() <= p.dt * a.abs() + TOL);
    }

    #[test]
    fn simulate_clamps_velocity_at_zero_and_ceiling() {
        let p = VehicleParams { v_max: 4.0, ..default_params() };
        let tcp = TrajectoryControlParams::new(2.0, 0.0, 0.0, 0.0);
        let braked = simulate_trajectory(&VehicleState::at_origin(1.0, 0.0), -5.0, &tcp, &p).unwrap();
        assert_eq!(braked.final_state().unwrap().v, 0.0);
        let floored = simulate_trajectory(&VehicleState::at_origin(1.0, 0.0), 50.0, &tcp, &p).unwrap();
        assert_eq!(floored.final_state().unwrap().v, 4.0);
    }

    #[test]
    fn simulate_constant_steering_traces_circle() {
        let p = VehicleParams { dt: 0.01, ..default_params() };
        let phi = 0.1;
        let v = 2.0;
        let c = curvature(phi, v, &p).unwrap();
        let radius = 1.0 / c;
        let tcp = TrajectoryControlParams::new(5.0, phi, phi, phi);
        let t = simulate_trajectory(&VehicleState::at_origin(v, phi), 0.0, &tcp, &p).unwrap();
        // Center of the circle is perpendicular-left of the start pose.
        let (cx, cy) = (0.0, radius);
        let mut worst = 0.0_f64;
        for s in &t.states {
            let r = ((s.x - cx).powi(2) + (s.y - cy).powi(2)).sqrt();
            worst = worst.max((r - radius).abs());
        }
        assert!(worst < 0.01, "max radial deviation {worst}");
    }

    #[test]
    fn simulate_preserves_timestamp_offset() {
        let p = default_params();
        let tcp = TrajectoryControlParams::new(1.0, 0.0, 0.0, 0.0);
        let start = VehicleState { t: 42.5, ..VehicleState::at_origin(2.0, 0.0) };
        let t = simulate_trajectory(&start, 0.0, &tcp, &p).unwrap();
        assert_eq!(t.states[0].t, 42.5);
        assert!((t.states[1].t - (42.5 + p.dt)).abs() < TOL);
    }

    #[test]
    fn simulate_final_state_matches_full_trajectory() {
        let p = default_params();
        let tcp = TrajectoryControlParams::new(3.0, 0.1, -0.05, 0.2);
        let x_o = VehicleState::at_origin(4.0, 0.02);
        let full = simulate_trajectory(&x_o, 0.5, &tcp, &p).unwrap();
        let profile = build_steering_profile(x_o.phi, &tcp).unwrap();
        let last = simulate_final_state(&x_o, 0.5, &profile, tcp.total_time, &p);
        assert_eq!(*full.final_state().unwrap(), last);
    }

    #[test]
    fn endpoint_is_continuous_across_step_boundaries() {
        // Total times straddling a whole-step boundary must give nearby
        // endpoints, unlike the discrete final state which jumps by v*dt.
        let p = default_params();
        let x_o = VehicleState::at_origin(5.0, 0.02);
        let eval = |tt: f64| {
            let tcp = TrajectoryControlParams::new(tt, 0.05, -0.03, 0.1);
            let profile = build_steering_profile(x_o.phi, &tcp).unwrap();
            simulate_endpoint(&x_o, 0.4, &profile, tt, &p)
        };
        let a = eval(2.024999);
        let b = eval(2.025001);
        assert!((a.x - b.x).abs() < 1e-4);
        assert!((a.y - b.y).abs() < 1e-4);
        assert!((a.theta - b.theta).abs() < 1e-5);
    }

    #[test]
    fn endpoint_matches_final_state_on_step_multiples() {
        let p = default_params();
        let x_o = VehicleState::at_origin(3.0, 0.0);
        let tcp = TrajectoryControlParams::new(2.0, 0.1, 0.05, -0.1);
        let profile = build_steering_profile(x_o.phi, &tcp).unwrap();
        let a = simulate_final_state(&x_o, 0.2, &profile, 2.0, &p);
        let b = simulate_endpoint(&x_o, 0.2, &profile, 2.0, &p);
        assert_eq!(a, b);
        let (traj, endpoint) = simulate_trajectory_with_endpoint(&x_o, 0.2, &tcp, &p).unwrap();
        assert_eq!(*traj.final_state().unwrap(), endpoint);
    }

    #[test]
    fn euler_halving_dt_shows_first_order_convergence() {
        // Constant curvature has a closed-form endpoint; compare Euler errors
        // at dt and dt/2. First-order convergence puts the ratio near 2.
        let phi = 0.08;
        let v = 3.0;
        let tt = 4.0;
        let endpoint = |dt: f64| {
            let p = VehicleParams { dt, ..default_params() };
            let tcp = TrajectoryControlParams::new(tt, phi, phi, phi);
            let t = simulate_trajectory(&VehicleState::at_origin(v, phi), 0.0, &tcp, &p).unwrap();
            *t.final_state().unwrap()
        };
        let p = default_params();
        let c = curvature(phi, v, &p).unwrap();
        let ang = c * v * tt;
        let exact = ((ang.sin()) / c, (1.0 - ang.cos()) / c);
        let err = |s: VehicleState| ((s.x - exact.0).powi(2) + (s.y - exact.1).powi(2)).sqrt();
        let e1 = err(endpoint(0.01));
        let e2 = err(endpoint(0.005));
        let ratio = e1 / e2;
        assert!((1.5..=2.5).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn wrap_angle_boundaries() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < TOL);
        assert!((wrap_angle(-6.2) - (2.0 * PI - 6.2)).abs() < TOL);
    }

    proptest! {
        #[test]
        fn spline_passes_through_all_knots(
            tt in 0.5_f64..12.0,
            phi_o in -0.5_f64..0.5,
            k1 in -0.5236_f64..0.5236,
            k2 in -0.5236_f64..0.5236,
            k3 in -0.5236_f64..0.5236,
        ) {
            let tcp = TrajectoryControlParams::new(tt, k1, k2, k3);
            let profile = build_steering_profile(phi_o, &tcp).unwrap();
            let times = [0.0, tt / 4.0, tt / 2.0, tt];
            let angles = [phi_o, k1, k2, k3];
            for (t, a) in times.iter().zip(angles.iter()) {
                prop_assert!((profile.eval(*t) - a).abs() < 1e-9);
            }
        }

        #[test]
        fn straight_line_is_exact(v in 0.5_f64..15.0, tt in 0.5_f64..8.0) {
            let p = VehicleParams { dt: 0.01, ..VehicleParams::default() };
            let tcp = TrajectoryControlParams::new(tt, 0.0, 0.0, 0.0);
            let t = simulate_trajectory(&VehicleState::at_origin(v, 0.0), 0.0, &tcp, &p).unwrap();
            let f = t.final_state().unwrap();
            let travelled = (tt / p.dt + 1e-9).floor() * p.dt * v;
            prop_assert!((f.x - travelled).abs() / travelled < 1e-6);
            prop_assert!(f.y.abs() < 1e-9);
        }

        #[test]
        fn understeer_strictly_reduces_curvature_with_speed(
            phi in 0.01_f64..0.5,
            v1 in 0.0_f64..10.0,
            dv in 0.1_f64..10.0,
        ) {
            let p = VehicleParams::default();
            let c1 = curvature(phi, v1, &p).unwrap();
            let c2 = curvature(phi, v1 + dv, &p).unwrap();
            prop_assert!(c2 < c1);
            prop_assert!(c2 > 0.0);
        }

        #[test]
        fn wrapped_angles_stay_in_range(a in -50.0_f64..50.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            // Same direction modulo 2*pi.
            prop_assert!(((w - a).rem_euclid(2.0 * std::f64::consts::PI)).abs() < 1e-9
                || ((w - a).rem_euclid(2.0 * std::f64::consts::PI) - 2.0 * std::f64::consts::PI).abs() < 1e-9);
        }
    }
}
