//! Centroidal position PID, geometric attitude PID and decoupled joint PD.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Frame, JointVector, RobotState, Wrench};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    pub pos_p: f64,
    pub pos_i: f64,
    pub pos_d: f64,
    pub att_p: f64,
    pub att_i: f64,
    pub att_d: f64,
    pub joint_p: f64,
    pub joint_d: f64,
    /// Per-axis clamp of the position error integral [m s].
    pub pos_integral_limit: f64,
    /// Per-axis clamp of the attitude error integral [rad s].
    pub att_integral_limit: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            pos_p: 4.0,
            pos_i: 0.4,
            pos_d: 2.8,
            att_p: 20.0,
            att_i: 1.0,
            att_d: 8.0,
            joint_p: 20.0,
            joint_d: 1.0,
            pos_integral_limit: 0.5,
            att_integral_limit: 0.5,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        let gains = [
            ("pos_p", self.pos_p),
            ("pos_i", self.pos_i),
            ("pos_d", self.pos_d),
            ("att_p", self.att_p),
            ("att_i", self.att_i),
            ("att_d", self.att_d),
            ("joint_p", self.joint_p),
            ("joint_d", self.joint_d),
        ];
        for (field, v) in gains {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(field, format!("gain must be non-negative, got {v}")));
            }
        }
        for (field, v) in [("pos_integral_limit", self.pos_integral_limit), ("att_integral_limit", self.att_integral_limit)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("clamp must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setpoint {
    pub position: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub q: JointVector,
}

impl Setpoint {
    pub fn hold(state: &RobotState) -> Self {
        Self { position: state.position, rotation: state.rotation, angular_velocity: Vector3::zeros(), q: state.q }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation.matrix();
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidState("setpoint rotation is not orthonormal".into()));
        }
        Ok(())
    }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `e_R = ½ (Rᵀ R_d − R_dᵀ R)^∨`.
pub fn attitude_error(r: &Rotation3<f64>, rd: &Rotation3<f64>) -> Vector3<f64> {
    let a = r.matrix().transpose() * rd.matrix();
    0.5 * vee(&(a - a.transpose()))
}

/// Trapezoidal integrator with per-axis clamp.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClampedIntegrator {
    pub value: Vector3<f64>,
    last: Option<Vector3<f64>>,
}

impl ClampedIntegrator {
    pub fn update(&mut self, e: &Vector3<f64>, dt: f64, limit: f64) -> Vector3<f64> {
        let prev = self.last.unwrap_or(*e);
        self.value += (prev + e) * (0.5 * dt);
        self.value = self.value.map(|v| v.clamp(-limit, limit));
        self.last = Some(*e);
        self.value
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Flight controller state: integrators and the previous position setpoint
/// (its finite difference feeds the derivative term).
#[derive(Debug, Clone, Default)]
pub struct FlightController {
    pub gains: ControllerGains,
    pos_integral: ClampedIntegrator,
    att_integral: ClampedIntegrator,
    last_setpoint: Option<Vector3<f64>>,
}

/// Errors of one control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingErrors {
    pub e_r: Vector3<f64>,
    pub e_rot: Vector3<f64>,
}

impl FlightController {
    pub fn new(gains: ControllerGains) -> Self {
        Self { gains, ..Default::default() }
    }

    pub fn reset(&mut self) {
        self.pos_integral.reset();
        self.att_integral.reset();
        self.last_setpoint = None;
    }

    pub fn position_integral(&self) -> Vector3<f64> {
        self.pos_integral.value
    }

    pub fn attitude_integral(&self) -> Vector3<f64> {
        self.att_integral.value
    }

    /// Desired thrust force in the body frame, gravity feed-forward included.
    pub fn position_control(&mut self, state: &RobotState, sp: &Setpoint, mass: f64, gravity: f64, dt: f64) -> Vector3<f64> {
        debug_assert!(dt > 0.0);
        let g = &self.gains;
        let e_r = sp.position - state.position;
        let rd_dot = self.last_setpoint.map_or(Vector3::zeros(), |prev| (sp.position - prev) / dt);
        self.last_setpoint = Some(sp.position);
        let e_r_dot = rd_dot - state.velocity;
        let integral = self.pos_integral.update(&e_r, dt, g.pos_integral_limit);
        let accel = e_r * g.pos_p + integral * g.pos_i + e_r_dot * g.pos_d + Vector3::new(0.0, 0.0, gravity);
        state.rotation.inverse() * (accel * mass)
    }

    /// Desired torque about the CoG in the body frame.
    pub fn attitude_control(&mut self, state: &RobotState, sp: &Setpoint, inertia: &Matrix3<f64>, dt: f64) -> Vector3<f64> {
        debug_assert!(dt > 0.0);
        let g = &self.gains;
        let e_rot = attitude_error(&state.rotation, &sp.rotation);
        let e_omega = (state.rotation.inverse() * sp.rotation) * sp.angular_velocity - state.angular_velocity;
        let integral = self.att_integral.update(&e_rot, dt, g.att_integral_limit);
        let w = &state.angular_velocity;
        inertia * (e_rot * g.att_p + integral * g.att_i + e_omega * g.att_d) + w.cross(&(inertia * w))
    }

    /// Full desired wrench in `{CoG}` and the tracking errors.
    pub fn desired_wrench(
        &mut self,
        state: &RobotState,
        sp: &Setpoint,
        mass: f64,
        gravity: f64,
        inertia: &Matrix3<f64>,
        dt: f64,
    ) -> (Wrench, TrackingErrors) {
        let errors = TrackingErrors { e_r: sp.position - state.position, e_rot: attitude_error(&state.rotation, &sp.rotation) };
        let force = self.position_control(state, sp, mass, gravity, dt);
        let torque = self.attitude_control(state, sp, inertia, dt);
        (Wrench { force, torque, frame: Frame::CoG }, errors)
    }
}

/// Decoupled joint PD, clamped to ±`torque_limit`.
pub fn joint_pd(q: &JointVector, q_dot: &JointVector, q_des: &JointVector, gains: &ControllerGains, torque_limit: f64) -> JointVector {
    JointVector::from_fn(|j, _| (gains.joint_p * (q_des[j] - q[j]) - gains.joint_d * q_dot[j]).clamp(-torque_limit, torque_limit))
}
