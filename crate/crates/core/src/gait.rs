//! Two-step crawl: move all legs with the torso on the ground, then raise,
//! translate and lower the torso with the feet pinned.
//!
//! Each step is a sequence of joint keyframes. Keyframe durations follow from
//! the joint speed limit plus a settle time; lowering phases end on a
//! touchdown timer after which the joint targets are reset to the measured
//! angles.

use std::f64::consts::FRAC_PI_4;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JointVector, RobotModel, N_LEGS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitParams {
    /// Foot and torso advance per cycle [m].
    pub stride: f64,
    /// Torso lift above the ground during the torso step [m].
    pub torso_lift_height: f64,
    /// Angle subtracted from the first pitch joint to lift a leg [rad].
    pub leg_lift_angle: f64,
    /// Extra time after the slowest joint has nominally arrived [s].
    pub settle_time: f64,
    /// Touchdown timer of the lowering phases [s].
    pub touchdown_time: f64,
    /// Walking direction in the ground plane (normalised on use).
    pub direction: [f64; 2],
    /// Horizontal hip-to-foot distance of the default stance [m].
    pub stance_radius: f64,
    /// Yaw of the default stance feet about each hip [rad].
    pub stance_yaw: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            stride: 0.2,
            torso_lift_height: 0.1,
            leg_lift_angle: 15f64.to_radians(),
            settle_time: 0.5,
            touchdown_time: 1.5,
            direction: [1.0, 0.0],
            stance_radius: 0.9,
            stance_yaw: FRAC_PI_4,
        }
    }
}

impl GaitParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stride", self.stride),
            ("torso_lift_height", self.torso_lift_height),
            ("leg_lift_angle", self.leg_lift_angle),
            ("stance_radius", self.stance_radius),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("settle_time", self.settle_time), ("touchdown_time", self.touchdown_time)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        if !self.stance_yaw.is_finite() {
            return Err(Error::invalid("stance_yaw", "must be finite"));
        }
        let d = Vector2::from(self.direction);
        if !(d.norm() > 1e-9) || d.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("direction", "must be a nonzero finite vector"));
        }
        Ok(())
    }

    /// Unit walking direction in 3-D (z = 0).
    pub fn direction3(&self) -> Vector3<f64> {
        let d = Vector2::from(self.direction).normalize();
        Vector3::new(d.x, d.y, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitPhase {
    LiftLegs,
    SwingLegs,
    LowerLegs,
    ResetLegTargets,
    RaiseTorso,
    TranslateTorso,
    LowerTorso,
    ResetTorsoTargets,
}

impl GaitPhase {
    pub const ALL: [GaitPhase; 8] = [
        GaitPhase::LiftLegs,
        GaitPhase::SwingLegs,
        GaitPhase::LowerLegs,
        GaitPhase::ResetLegTargets,
        GaitPhase::RaiseTorso,
        GaitPhase::TranslateTorso,
        GaitPhase::LowerTorso,
        GaitPhase::ResetTorsoTargets,
    ];

    pub fn next(self) -> Self {
        let k = Self::ALL.iter().position(|&p| p == self).unwrap();
        Self::ALL[(k + 1) % Self::ALL.len()]
    }

    /// Legs move while the torso rests on the ground.
    pub fn is_leg_phase(self) -> bool {
        matches!(self, GaitPhase::LiftLegs | GaitPhase::SwingLegs | GaitPhase::LowerLegs | GaitPhase::ResetLegTargets)
    }

    pub fn is_lowering(self) -> bool {
        matches!(self, GaitPhase::LowerLegs | GaitPhase::LowerTorso)
    }

    pub fn is_reset(self) -> bool {
        matches!(self, GaitPhase::ResetLegTargets | GaitPhase::ResetTorsoTargets)
    }

    pub fn name(self) -> &'static str {
        match self {
            GaitPhase::LiftLegs => "lift_legs",
            GaitPhase::SwingLegs => "swing_legs",
            GaitPhase::LowerLegs => "lower_legs",
            GaitPhase::ResetLegTargets => "reset_leg_targets",
            GaitPhase::RaiseTorso => "raise_torso",
            GaitPhase::TranslateTorso => "translate_torso",
            GaitPhase::LowerTorso => "lower_torso",
            GaitPhase::ResetTorsoTargets => "reset_torso_targets",
        }
    }
}

/// Angles of the three joints used by the crawl; the second yaw stays at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegIk {
    pub yaw: f64,
    pub pitch: f64,
    pub knee: f64,
    /// Within 1e-3 m of full extension.
    pub near_singular: bool,
}

/// Analytic leg IK for a foot target in the hip frame (x away from the
/// torso, z up). The knee is non-negative, which puts the elbow above the
/// hip–foot line.
pub fn leg_ik(model: &RobotModel, leg: usize, foot_hip: &Vector3<f64>) -> Result<LegIk> {
    let l = model.link_length;
    let reach = 2.0 * l;
    let rho = foot_hip.x.hypot(foot_hip.y);
    let d = rho.hypot(foot_hip.z);
    if !(d <= reach) || d < 1e-9 {
        return Err(Error::Unreachable { leg, distance: d, reach });
    }
    let yaw = if rho < 1e-12 { 0.0 } else { foot_hip.y.atan2(foot_hip.x) };
    let cos_knee = ((d * d - 2.0 * l * l) / (2.0 * l * l)).clamp(-1.0, 1.0);
    let knee = cos_knee.acos();
    // Angle of the target below the horizontal in the leg plane.
    let depression = (-foot_hip.z).atan2(rho);
    Ok(LegIk { yaw, pitch: depression - 0.5 * knee, knee, near_singular: reach - d < 1e-3 })
}

/// Leg IK for a foot given in the baselink frame; writes the leg's joints.
pub fn leg_ik_base(model: &RobotModel, leg: usize, foot_base: &Vector3<f64>, q: &mut JointVector) -> Result<LegIk> {
    let local = model.hip_rotation(leg).transpose() * (foot_base - model.hip_position(leg));
    let ik = leg_ik(model, leg, &local)?;
    let [j0, j1, j2, j3] = RobotModel::leg_joints(leg);
    q[j0] = ik.yaw;
    q[j1] = ik.pitch;
    q[j2] = 0.0;
    q[j3] = ik.knee;
    Ok(ik)
}

/// Joint angles placing every foot at its world foothold for a torso at
/// `torso` (baselink origin, level orientation).
pub fn stance_joints(model: &RobotModel, torso: &Vector3<f64>, feet: &[Vector3<f64>; N_LEGS]) -> Result<JointVector> {
    let mut q = JointVector::zeros();
    for leg in 0..N_LEGS {
        leg_ik_base(model, leg, &(feet[leg] - torso), &mut q)?;
    }
    check_limits(model, &q)?;
    Ok(q)
}

/// Default footholds for a torso at `torso`: each foot at the stance radius
/// from its hip, yawed by the stance yaw, level with the torso base.
pub fn default_footholds(model: &RobotModel, params: &GaitParams, torso: &Vector3<f64>) -> [Vector3<f64>; N_LEGS] {
    std::array::from_fn(|leg| {
        let local = Vector3::new(params.stance_yaw.cos(), params.stance_yaw.sin(), 0.0) * params.stance_radius;
        torso + model.hip_position(leg) + model.hip_rotation(leg) * local
    })
}

pub fn check_limits(model: &RobotModel, q: &JointVector) -> Result<()> {
    for (joint, &value) in q.iter().enumerate() {
        if value.abs() > model.joint_angle_limit + 1e-12 {
            return Err(Error::JointLimit { joint, value, limit: model.joint_angle_limit });
        }
    }
    Ok(())
}

/// Check that moving from `from` to `to` within `duration` respects the speed limit.
pub fn check_rate(model: &RobotModel, from: &JointVector, to: &JointVector, duration: f64) -> Result<()> {
    for joint in 0..from.len() {
        let delta = (to[joint] - from[joint]).abs();
        if delta > model.joint_speed_limit * duration + 1e-12 {
            return Err(Error::JointSpeed { joint, delta, duration, limit: model.joint_speed_limit });
        }
    }
    Ok(())
}

/// One joint keyframe of a step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Keyframe {
    pub phase: GaitPhase,
    #[serde(serialize_with = "ser_joints")]
    pub q: JointVector,
    /// Planned baselink origin (world).
    pub torso: Vector3<f64>,
    pub duration: f64,
}

fn ser_joints<S: serde::Serializer>(q: &JointVector, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(q.iter())
}

fn duration_for(model: &RobotModel, params: &GaitParams, from: &JointVector, to: &JointVector, phase: GaitPhase) -> f64 {
    let travel = (to - from).amax() / model.joint_speed_limit;
    let hold = if phase.is_lowering() { params.touchdown_time } else { params.settle_time };
    travel + hold
}

fn keyframe(model: &RobotModel, params: &GaitParams, from: &JointVector, q: JointVector, torso: Vector3<f64>, phase: GaitPhase) -> Result<Keyframe> {
    check_limits(model, &q)?;
    let duration = duration_for(model, params, from, &q, phase);
    check_rate(model, from, &q, duration)?;
    Ok(Keyframe { phase, q, torso, duration })
}

/// Keyframes moving every foot from `current` to `next` footholds while the
/// torso rests at `torso`: lift (first pitch − Δ), swing (yaw and knee to the
/// new IK solution), lower (first pitch to the new IK solution).
pub fn plan_leg_step(
    model: &RobotModel,
    params: &GaitParams,
    q_now: &JointVector,
    torso: &Vector3<f64>,
    next: &[Vector3<f64>; N_LEGS],
) -> Result<[Keyframe; 3]> {
    let target = stance_joints(model, torso, next)?;
    let mut lifted = *q_now;
    for leg in 0..N_LEGS {
        lifted[4 * leg + 1] -= params.leg_lift_angle;
    }
    let mut swung = lifted;
    for leg in 0..N_LEGS {
        for j in [4 * leg, 4 * leg + 2, 4 * leg + 3] {
            swung[j] = target[j];
        }
    }
    let k1 = keyframe(model, params, q_now, lifted, *torso, GaitPhase::LiftLegs)?;
    let k2 = keyframe(model, params, &lifted, swung, *torso, GaitPhase::SwingLegs)?;
    let k3 = keyframe(model, params, &swung, target, *torso, GaitPhase::LowerLegs)?;
    Ok([k1, k2, k3])
}

/// Keyframes raising the torso, translating it by one stride and lowering it,
/// with the feet pinned at `feet`.
pub fn plan_torso_step(
    model: &RobotModel,
    params: &GaitParams,
    q_now: &JointVector,
    torso: &Vector3<f64>,
    feet: &[Vector3<f64>; N_LEGS],
) -> Result<[Keyframe; 3]> {
    let up = torso + Vector3::new(0.0, 0.0, params.torso_lift_height);
    let moved = up + params.direction3() * params.stride;
    let down = torso + params.direction3() * params.stride;
    let q_up = stance_joints(model, &up, feet)?;
    let q_moved = stance_joints(model, &moved, feet)?;
    let q_down = stance_joints(model, &down, feet)?;
    let k1 = keyframe(model, params, q_now, q_up, up, GaitPhase::RaiseTorso)?;
    let k2 = keyframe(model, params, &q_up, q_moved, moved, GaitPhase::TranslateTorso)?;
    let k3 = keyframe(model, params, &q_moved, q_down, down, GaitPhase::LowerTorso)?;
    Ok([k1, k2, k3])
}

/// Touchdown by timer: once a lowering phase has lasted `duration`, contact is
/// declared and the targets are reset to the measured angles.
pub fn touchdown_and_reset(phase: GaitPhase, elapsed: f64, duration: f64, q: &JointVector, q_des: &JointVector) -> JointVector {
    if phase.is_lowering() && elapsed >= duration {
        *q
    } else {
        *q_des
    }
}

/// Output of one planner tick.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitCommand {
    pub phase: GaitPhase,
    pub cycle: usize,
    pub q_des: JointVector,
    /// Planned torso (baselink origin) at the end of the current phase.
    pub torso_target: Vector3<f64>,
    pub finished: bool,
}

/// Deterministic crawl state machine advanced by the simulation tick.
#[derive(Debug, Clone)]
pub struct GaitPlanner {
    model: RobotModel,
    pub params: GaitParams,
    cycles: usize,
    cycle: usize,
    phase: GaitPhase,
    elapsed: f64,
    keyframes: Vec<Keyframe>,
    /// Planned torso origin at rest on the ground.
    torso: Vector3<f64>,
    feet: [Vector3<f64>; N_LEGS],
    q_des: JointVector,
    finished: bool,
    log: Vec<Keyframe>,
}

impl GaitPlanner {
    /// Planner starting from the default stance around `torso`.
    pub fn new(model: &RobotModel, params: GaitParams, cycles: usize, torso: Vector3<f64>) -> Result<Self> {
        params.validate()?;
        let feet = default_footholds(model, &params, &torso);
        let q0 = stance_joints(model, &torso, &feet)?;
        Ok(Self {
            model: model.clone(),
            params,
            cycles,
            cycle: 0,
            phase: GaitPhase::LiftLegs,
            elapsed: 0.0,
            keyframes: Vec::new(),
            torso,
            feet,
            q_des: q0,
            finished: cycles == 0,
            log: Vec::new(),
        })
    }

    /// Joint angles of the initial stance.
    pub fn initial_joints(&self) -> Result<JointVector> {
        stance_joints(&self.model, &self.torso, &self.feet)
    }

    pub fn footholds(&self) -> &[Vector3<f64>; N_LEGS] {
        &self.feet
    }

    pub fn planned_torso(&self) -> Vector3<f64> {
        self.torso
    }

    pub fn phase(&self) -> GaitPhase {
        self.phase
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Every keyframe planned so far.
    pub fn keyframe_log(&self) -> &[Keyframe] {
        &self.log
    }

    fn current_keyframe(&self) -> Option<&Keyframe> {
        let k = match self.phase {
            GaitPhase::LiftLegs | GaitPhase::RaiseTorso => 0,
            GaitPhase::SwingLegs | GaitPhase::TranslateTorso => 1,
            GaitPhase::LowerLegs | GaitPhase::LowerTorso => 2,
            _ => return None,
        };
        self.keyframes.get(k)
    }

    fn plan(&mut self, q: &JointVector) -> Result<()> {
        let frames = match self.phase {
            GaitPhase::LiftLegs => {
                let step = self.params.direction3() * self.params.stride;
                let next = self.feet.map(|f| f + step);
                let frames = plan_leg_step(&self.model, &self.params, q, &self.torso, &next)?;
                self.feet = next;
                frames
            }
            GaitPhase::RaiseTorso => {
                let frames = plan_torso_step(&self.model, &self.params, q, &self.torso, &self.feet)?;
                self.torso = frames[2].torso;
                frames
            }
            _ => return Ok(()),
        };
        self.log.extend(frames.iter().cloned());
        self.keyframes = frames.to_vec();
        Ok(())
    }

    /// Advance by `dt` given the measured joint angles.
    pub fn update(&mut self, q: &JointVector, dt: f64) -> Result<GaitCommand> {
        if !self.finished {
            if self.elapsed == 0.0 && matches!(self.phase, GaitPhase::LiftLegs | GaitPhase::RaiseTorso) && self.keyframes_stale() {
                self.plan(q)?;
            }
            if let Some(kf) = self.current_keyframe() {
                self.q_des = kf.q;
            }
            self.elapsed += dt;
            let duration = self.current_keyframe().map_or(0.0, |k| k.duration);
            self.q_des = touchdown_and_reset(self.phase, self.elapsed, duration, q, &self.q_des);
            if self.phase.is_reset() {
                self.q_des = *q;
            }
            if self.elapsed >= duration - 1e-9 {
                self.advance();
            }
        }
        let torso_target = self.current_keyframe().map_or(self.torso, |k| k.torso);
        Ok(GaitCommand { phase: self.phase, cycle: self.cycle, q_des: self.q_des, torso_target, finished: self.finished })
    }

    fn keyframes_stale(&self) -> bool {
        match (self.phase, self.keyframes.first()) {
            (GaitPhase::LiftLegs, Some(k)) => k.phase != GaitPhase::LiftLegs,
            (GaitPhase::RaiseTorso, Some(k)) => k.phase != GaitPhase::RaiseTorso,
            (_, None) => true,
            _ => false,
        }
    }

    fn advance(&mut self) {
        self.elapsed = 0.0;
        if self.phase == GaitPhase::ResetTorsoTargets {
            self.cycle += 1;
            if self.cycle >= self.cycles {
                self.finished = true;
            }
        }
        self.phase = self.phase.next();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_kinematics;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn foot_of(model: &RobotModel, leg: usize, ik: &LegIk) -> Vector3<f64> {
        let mut q = JointVector::zeros();
        q[4 * leg] = ik.yaw;
        q[4 * leg + 1] = ik.pitch;
        q[4 * leg + 3] = ik.knee;
        let kin = forward_kinematics(model, &q);
        model.hip_rotation(leg).transpose() * (kin.feet_base[leg] - model.hip_position(leg))
    }

    #[test]
    fn ik_examples() {
        let model = RobotModel::default();
        let straight = leg_ik(&model, 0, &Vector3::new(1.08, 0.0, 0.0)).unwrap();
        assert_relative_eq!(straight.yaw, 0.0);
        assert_relative_eq!(straight.pitch, 0.0, epsilon = 1e-7);
        assert_relative_eq!(straight.knee, 0.0, epsilon = 1e-7);
        assert!(straight.near_singular);

        let d = 2.0 * 0.54 * FRAC_PI_4.cos();
        let bent = leg_ik(&model, 1, &Vector3::new(d, 0.0, 0.0)).unwrap();
        assert_relative_eq!(bent.pitch, -FRAC_PI_4, epsilon = 1e-12);
        assert_relative_eq!(bent.knee, 2.0 * FRAC_PI_4, epsilon = 1e-12);
        assert!(!bent.near_singular);
        assert_relative_eq!(foot_of(&model, 1, &bent), Vector3::new(d, 0.0, 0.0), epsilon = 1e-12);

        let lateral = leg_ik(&model, 2, &Vector3::new(0.5, 0.4, -0.1)).unwrap();
        assert_relative_eq!(lateral.yaw, 0.4f64.atan2(0.5), epsilon = 1e-15);

        let err = leg_ik(&model, 3, &Vector3::new(1.2, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Unreachable { leg: 3, .. }));
    }

    #[test]
    fn default_stance_within_limits() {
        let model = RobotModel::default();
        let params = GaitParams::default();
        let torso = Vector3::zeros();
        let feet = default_footholds(&model, &params, &torso);
        let q = stance_joints(&model, &torso, &feet).unwrap();
        let kin = forward_kinematics(&model, &q);
        for leg in 0..N_LEGS {
            assert_relative_eq!(kin.feet_base[leg], feet[leg], epsilon = 1e-9);
            assert_relative_eq!(q[4 * leg], FRAC_PI_4, epsilon = 1e-12);
        }
    }

    #[test]
    fn leg_step_moves_every_foot_by_stride() {
        let model = RobotModel::default();
        let params = GaitParams::default();
        let torso = Vector3::zeros();
        let feet = default_footholds(&model, &params, &torso);
        let q0 = stance_joints(&model, &torso, &feet).unwrap();
        let next = feet.map(|f| f + Vector3::new(0.2, 0.0, 0.0));
        let frames = plan_leg_step(&model, &params, &q0, &torso, &next).unwrap();
        let kin = forward_kinematics(&model, &frames[2].q);
        for leg in 0..N_LEGS {
            assert_relative_eq!(kin.feet_base[leg] - feet[leg], Vector3::new(0.2, 0.0, 0.0), epsilon = 1e-9);
        }
        // Lifted and swung keyframes keep the feet above the ground.
        for kf in &frames[..2] {
            let kin = forward_kinematics(&model, &kf.q);
            assert!(kin.feet_base.iter().all(|f| f.z > 0.0));
        }
        for w in frames.windows(2) {
            check_rate(&model, &w[0].q, &w[1].q, w[1].duration).unwrap();
        }
    }

    #[test]
    fn identity_leg_step_returns_to_start() {
        let model = RobotModel::default();
        let params = GaitParams::default();
        let torso = Vector3::zeros();
        let feet = default_footholds(&model, &params, &torso);
        let q0 = stance_joints(&model, &torso, &feet).unwrap();
        let frames = plan_leg_step(&model, &params, &q0, &torso, &feet).unwrap();
        assert_relative_eq!(frames[0].q[1], q0[1] - params.leg_lift_angle, epsilon = 1e-12);
        assert_relative_eq!(frames[2].q, q0, epsilon = 1e-12);
    }

    #[test]
    fn leg_step_beyond_reach_fails() {
        let model = RobotModel::default();
        let params = GaitParams::default();
        let torso = Vector3::zeros();
        let feet = default_footholds(&model, &params, &torso);
        let q0 = stance_joints(&model, &torso, &feet).unwrap();
        let far = feet.map(|f| f + Vector3::new(0.6, 0.0, 0.0));
        assert!(matches!(plan_leg_step(&model, &params, &q0, &torso, &far), Err(Error::Unreachable { .. })));
    }

    #[test]
    fn torso_step_keeps_feet_pinned() {
        let model = RobotModel::default();
        let params = GaitParams::default();
        let torso = Vector3::zeros();
        let feet0 = default_footholds(&model, &params, &torso);
        let feet = feet0.map(|f| f + Vector3::new(0.2, 0.0, 0.0));
        let q0 = stance_joints(&model, &torso, &feet).unwrap();
        let frames = plan_torso_step(&model, &params, &q0, &torso, &feet).unwrap();
        assert_relative_eq!(frames[2].torso, Vector3::new(0.2, 0.0, 0.0), epsilon = 1e-15);
        for kf in &frames {
            let kin = forward_kinematics(&model, &kf.q);
            for leg in 0..N_LEGS {
                assert_relative_eq!(kin.feet_base[leg] + kf.torso, feet[leg], epsilon = 1e-9);
            }
        }
        // The cycle closes: final joints equal the default stance.
        let q_start = stance_joints(&model, &torso, &feet0).unwrap();
        assert_relative_eq!(frames[2].q, q_start, epsilon = 1e-9);
    }

    #[test]
    fn zero_stride_torso_step_bounces() {
        let model = RobotModel::default();
        let params = GaitParams { stride: 1e-12, ..Default::default() };
        let torso = Vector3::zeros();
        let feet = default_footholds(&model, &params, &torso);
        let q0 = stance_joints(&model, &torso, &feet).unwrap();
        let frames = plan_torso_step(&model, &params, &q0, &torso, &feet).unwrap();
        assert_relative_eq!(frames[0].torso.z, 0.1);
        assert_relative_eq!(frames[2].q, q0, epsilon = 1e-9);
    }

    #[test]
    fn touchdown_reset() {
        let q = JointVector::from_element(0.1);
        let qd = JointVector::from_element(0.2);
        assert_eq!(touchdown_and_reset(GaitPhase::LowerLegs, 1.0, 2.0, &q, &qd), qd);
        let reset = touchdown_and_reset(GaitPhase::LowerLegs, 2.0, 2.0, &q, &qd);
        assert_eq!(reset, q);
        assert_eq!(touchdown_and_reset(GaitPhase::LowerLegs, 2.0, 2.0, &q, &reset), reset);
        let pd = crate::control::joint_pd(&q, &JointVector::from_element(0.3), &reset, &Default::default(), 7.0);
        assert_relative_eq!(pd, JointVector::from_element(-0.3), epsilon = 1e-15);
        assert_eq!(touchdown_and_reset(GaitPhase::SwingLegs, 9.0, 2.0, &q, &qd), qd);
    }

    #[test]
    fn phases_cycle_in_order() {
        let mut p = GaitPhase::LiftLegs;
        for expected in GaitPhase::ALL.iter().cycle().skip(1).take(8) {
            p = p.next();
            assert_eq!(p, *expected);
        }
        assert_eq!(p, GaitPhase::LiftLegs);
    }

    #[test]
    fn planner_runs_one_cycle_with_ideal_joints() {
        let model = RobotModel::default();
        let mut planner = GaitPlanner::new(&model, GaitParams::default(), 1, Vector3::zeros()).unwrap();
        let mut q = planner.initial_joints().unwrap();
        let start = q;
        let mut visited = vec![];
        for _ in 0..100_000 {
            let cmd = planner.update(&q, 0.025).unwrap();
            if visited.last() != Some(&cmd.phase) {
                visited.push(cmd.phase);
            }
            q = cmd.q_des;
            if cmd.finished {
                break;
            }
        }
        assert!(planner.is_finished());
        assert_eq!(&visited[..8], &GaitPhase::ALL);
        assert_relative_eq!(planner.planned_torso(), Vector3::new(0.2, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(q, start, epsilon = 1e-9);
        assert_eq!(planner.keyframe_log().len(), 6);
    }

    proptest! {
        #[test]
        fn ik_fk_roundtrip(r in 0.05..1.07f64, az in -1.5..1.5f64, el in -1.2..1.2f64) {
            let model = RobotModel::default();
            let target = Vector3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin());
            let ik = leg_ik(&model, 0, &target).unwrap();
            prop_assert!(ik.knee >= 0.0);
            prop_assert!((foot_of(&model, 0, &ik) - target).norm() < 1e-9);
        }
    }
}
