//! Vehicle kinematics and low-level tracking control.
//!
//! Shared by the learning vehicle and background traffic. Everything here is
//! a pure function of value types except [`PidController`], whose integral
//! state is owned by the vehicle it drives.

use serde::{Deserialize, Serialize};
use socialdrive_nn::Scalar;

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Polyline};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub x: T,
    pub y: T,
    /// Counter-clockwise from +x, in `(-π, π]`.
    pub heading: T,
    /// Non-negative speed along the heading.
    pub speed: T,
}

impl<T: Scalar> VehicleState<T> {
    pub fn new(x: T, y: T, heading: T, speed: T) -> Result<Self> {
        let s = Self {
            x,
            y,
            heading: normalize_angle(heading),
            speed,
        };
        s.check()?;
        if speed < T::zero() {
            return Err(Error::Invalid(format!("negative speed {speed}")));
        }
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Err(Error::NonFinite("vehicle position"));
        }
        if !(self.heading.is_finite() && self.speed.is_finite()) {
            return Err(Error::NonFinite("vehicle heading/speed"));
        }
        Ok(())
    }

    pub fn position(&self) -> [T; 2] {
        [self.x, self.y]
    }

    /// World-frame velocity `(v·cos h, v·sin h)`.
    pub fn velocity(&self) -> [T; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput<T> {
    /// Front-wheel angle.
    pub steering: T,
    pub accel: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BicycleParams<T> {
    pub wheelbase: T,
    pub length: T,
    pub width: T,
    pub max_steer: T,
    pub max_accel: T,
    /// Magnitude of the strongest allowed braking.
    pub max_decel: T,
}

impl<T: Scalar> Default for BicycleParams<T> {
    fn default() -> Self {
        Self {
            wheelbase: T::lit(2.5),
            length: T::lit(5.0),
            width: T::lit(2.0),
            max_steer: T::lit(0.6),
            max_accel: T::lit(5.0),
            max_decel: T::lit(6.0),
        }
    }
}

impl<T: Scalar> BicycleParams<T> {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [
            self.wheelbase,
            self.length,
            self.width,
            self.max_steer,
            self.max_accel,
            self.max_decel,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
            return Err("all vehicle parameters must be positive".into());
        }
        if self.max_steer >= T::lit(std::f64::consts::FRAC_PI_2) {
            return Err("max_steer must be below pi/2".into());
        }
        Ok(())
    }

    pub fn clamp_accel(&self, a: T) -> T {
        a.max(-self.max_decel).min(self.max_accel)
    }

    pub fn clamp_steer(&self, d: T) -> T {
        d.max(-self.max_steer).min(self.max_steer)
    }
}

/// One forward-Euler step of the kinematic bicycle model referenced at the
/// center of gravity (midway along the wheelbase). Controls are saturated to
/// the actuator envelope of `params`.
pub fn step_bicycle<T: Scalar>(
    state: &VehicleState<T>,
    u: &ControlInput<T>,
    dt: T,
    params: &BicycleParams<T>,
) -> Result<VehicleState<T>> {
    state.check()?;
    if !(u.steering.is_finite() && u.accel.is_finite()) {
        return Err(Error::NonFinite("control input"));
    }
    if !(dt.is_finite() && dt > T::zero()) {
        return Err(Error::Invalid(format!("time step {dt}")));
    }
    let steer = params.clamp_steer(u.steering);
    let accel = params.clamp_accel(u.accel);
    let v = state.speed;
    let tan_d = steer.tan();
    let beta = (tan_d / T::lit(2.0)).atan();
    let course = state.heading + beta;
    Ok(VehicleState {
        x: state.x + v * course.cos() * dt,
        y: state.y + v * course.sin() * dt,
        heading: normalize_angle(state.heading + v * tan_d * beta.cos() / params.wheelbase * dt),
        speed: (v + accel * dt).max(T::zero()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains<T> {
    pub kp: T,
    pub ki: T,
    pub kd: T,
    /// Anti-windup bound on the error integral (m/s·s).
    pub integral_limit: T,
}

impl<T: Scalar> Default for PidGains<T> {
    fn default() -> Self {
        Self {
            kp: T::lit(1.2),
            ki: T::lit(0.1),
            kd: T::zero(),
            integral_limit: T::lit(5.0),
        }
    }
}

/// Speed-tracking PID with a clamped integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidController<T> {
    pub gains: PidGains<T>,
    pub integral: T,
    prev_error: Option<T>,
}

impl<T: Scalar> PidController<T> {
    pub fn new(gains: PidGains<T>) -> Self {
        Self {
            gains,
            integral: T::zero(),
            prev_error: None,
        }
    }

    pub fn reset(&mut self) {
        self.integral = T::zero();
        self.prev_error = None;
    }
}

/// Acceleration command toward `v_target`, clamped to the actuator envelope.
pub fn pid_speed<T: Scalar>(
    v_target: T,
    state: &VehicleState<T>,
    pid: &mut PidController<T>,
    dt: T,
    params: &BicycleParams<T>,
) -> T {
    let g = pid.gains;
    let e = v_target - state.speed;
    pid.integral = (pid.integral + e * dt).max(-g.integral_limit).min(g.integral_limit);
    let de = match pid.prev_error {
        Some(prev) => (e - prev) / dt,
        None => T::zero(),
    };
    pid.prev_error = Some(e);
    params.clamp_accel(g.kp * e + g.ki * pid.integral + g.kd * de)
}

/// Pure-pursuit steering toward the route point `lookahead` metres beyond
/// the rear axle's closest point. Pursuit geometry is evaluated at the rear
/// axle (half a wheelbase behind the state position), where the law tracks
/// circular arcs without steady-state offset. Past the route end the final
/// segment is extended; once the vehicle itself is beyond the end the
/// command is zero.
pub fn track_route<T: Scalar>(
    state: &VehicleState<T>,
    route: &Polyline<T>,
    progress_hint: Option<T>,
    lookahead: T,
    params: &BicycleParams<T>,
) -> T {
    let p = state.position();
    let end = route.end();
    let t = route.tangent_at(route.length());
    if (p[0] - end[0]) * t[0] + (p[1] - end[1]) * t[1] >= T::zero() {
        return T::zero();
    }
    let half = params.wheelbase / T::lit(2.0);
    let rear = [
        state.x - half * state.heading.cos(),
        state.y - half * state.heading.sin(),
    ];
    let proj = match progress_hint {
        Some(s) => route.project_window(rear, s - lookahead, s + lookahead),
        None => route.project(rear),
    };
    let target = route.point_at(proj.s + lookahead);
    let bearing = (target[1] - rear[1]).atan2(target[0] - rear[0]);
    let alpha = normalize_angle(bearing - state.heading);
    let steer = (T::lit(2.0) * params.wheelbase * alpha.sin() / lookahead).atan();
    params.clamp_steer(steer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(x: f64, y: f64, h: f64, v: f64) -> VehicleState<f64> {
        VehicleState::new(x, y, h, v).unwrap()
    }

    #[test]
    fn straight_line_step() {
        let p = BicycleParams::default();
        let u = ControlInput {
            steering: 0.0,
            accel: 0.0,
        };
        let s = step_bicycle(&st(0.0, 0.0, 0.0, 5.0), &u, 0.1, &p).unwrap();
        assert_eq!(s, st(0.5, 0.0, 0.0, 5.0));
    }

    #[test]
    fn zero_speed_holds_pose() {
        let p = BicycleParams::default();
        let s0 = st(1.0, -2.0, 0.7, 0.0);
        for steering in [-0.6, 0.0, 0.3] {
            let u = ControlInput { steering, accel: 0.0 };
            assert_eq!(step_bicycle(&s0, &u, 0.1, &p).unwrap(), s0);
        }
    }

    #[test]
    fn speed_never_negative_and_nan_rejected() {
        let p = BicycleParams::default();
        let u = ControlInput {
            steering: 0.0,
            accel: -100.0,
        };
        let s = step_bicycle(&st(0.0, 0.0, 0.0, 0.3), &u, 0.1, &p).unwrap();
        assert_eq!(s.speed, 0.0);
        let bad = ControlInput {
            steering: f64::NAN,
            accel: 0.0,
        };
        assert!(step_bicycle(&s, &bad, 0.1, &p).is_err());
        assert!(VehicleState::new(0.0, f64::INFINITY, 0.0, 1.0).is_err());
        assert!(VehicleState::new(0.0, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn pid_examples() {
        let p = BicycleParams::default();
        let mut pid = PidController::new(PidGains::default());
        assert_eq!(pid_speed(4.0, &st(0.0, 0.0, 0.0, 4.0), &mut pid, 0.1, &p), 0.0);

        let mut p_only = PidController::new(PidGains {
            kp: 1.2,
            ki: 0.0,
            kd: 0.0,
            integral_limit: 5.0,
        });
        let a = pid_speed(5.0, &st(0.0, 0.0, 0.0, 3.0), &mut p_only, 0.1, &p);
        assert!((a - 2.4).abs() < 1e-12);
    }

    #[test]
    fn pid_integral_is_clamped() {
        let p = BicycleParams::default();
        let mut pid = PidController::new(PidGains::default());
        for _ in 0..1000 {
            pid_speed(100.0, &st(0.0, 0.0, 0.0, 0.0), &mut pid, 0.1, &p);
        }
        assert_eq!(pid.integral, 5.0);
    }

    #[test]
    fn pure_pursuit_basics() {
        let p = BicycleParams::default();
        let route = Polyline::new(vec![[0.0, 0.0], [100.0, 0.0]]);
        assert_eq!(track_route(&st(10.0, 0.0, 0.0, 5.0), &route, None, 5.0, &p), 0.0);
        // lookahead point straight to the left of the heading saturates
        let s = st(10.0, 0.0, -std::f64::consts::FRAC_PI_2, 5.0);
        assert_eq!(track_route(&s, &route, None, 5.0, &p), p.max_steer);
        assert_eq!(track_route(&st(120.0, 0.0, 1.0, 5.0), &route, None, 5.0, &p), 0.0);
    }
}
