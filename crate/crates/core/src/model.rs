//! Kinematic and inertial model of the four-legged, eight-link skeleton.
//!
//! Frames: the baselink sits at the torso center. The `{CoG}` frame shares the
//! baselink orientation and is translated to the whole-body center of mass.
//! Leg `l` is mounted at the torso edge at heading `l * 90°`. Every joint
//! module is a yaw joint (about local z) followed by a pitch joint (about
//! local y); positive pitch rotates the distal link downward. Link frames
//! have x along the rod (proximal to distal) and z up when the leg is flat.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LEGS: usize = 4;
pub const N_LINKS: usize = 8;
pub const N_ROTORS: usize = N_LINKS;
pub const N_JOINTS: usize = 16;
/// Torso plus one segment per link.
pub const N_SEGMENTS: usize = N_LINKS + 1;

pub type JointVector = SVector<f64, N_JOINTS>;
/// Translational Jacobian of a point w.r.t. all joint angles.
pub type Jacobian = SMatrix<f64, 3, N_JOINTS>;

/// Immutable geometric and inertial description of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotModel {
    /// Distance from the torso center to each hip joint [m].
    pub torso_half_width: f64,
    /// Length of every link [m].
    pub link_length: f64,
    /// Rotor position along the link, measured from its proximal joint [m].
    pub rotor_offset: f64,
    /// Torso mass followed by the eight link masses [kg].
    pub segment_masses: Vec<f64>,
    /// Maximum thrust of one rotor module [N].
    pub thrust_limit: f64,
    /// Maximum joint servo torque [N m].
    pub joint_torque_limit: f64,
    /// Symmetric joint angle limit [rad].
    pub joint_angle_limit: f64,
    /// Maximum joint speed [rad/s].
    pub joint_speed_limit: f64,
    /// Gravity magnitude [m/s^2].
    pub gravity: f64,
    /// Add the thin-rod inertia of each link to the composite inertia.
    pub rod_inertia: bool,
}

impl Default for RobotModel {
    fn default() -> Self {
        let mut segment_masses = vec![2.4];
        segment_masses.extend(std::iter::repeat_n(1.7, N_LINKS));
        Self {
            torso_half_width: 0.27,
            link_length: 0.54,
            rotor_offset: 0.27,
            segment_masses,
            thrust_limit: 42.0,
            joint_torque_limit: 7.0,
            joint_angle_limit: FRAC_PI_2,
            joint_speed_limit: 0.2,
            gravity: 9.8,
            rod_inertia: true,
        }
    }
}

fn positive(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive and finite, got {value}")))
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<()> {
        positive("torso_half_width", self.torso_half_width)?;
        positive("link_length", self.link_length)?;
        positive("rotor_offset", self.rotor_offset)?;
        if self.rotor_offset > self.link_length {
            return Err(Error::invalid("rotor_offset", "must not exceed link_length"));
        }
        if self.segment_masses.len() != N_SEGMENTS {
            return Err(Error::invalid(
                "segment_masses",
                format!("expected {N_SEGMENTS} entries (torso + 8 links), got {}", self.segment_masses.len()),
            ));
        }
        // Zero masses are allowed so that gravity-free test models can be built.
        if self.segment_masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::invalid("segment_masses", "masses must be finite and non-negative"));
        }
        if self.total_mass() <= 0.0 {
            return Err(Error::invalid("segment_masses", "total mass must be positive"));
        }
        positive("thrust_limit", self.thrust_limit)?;
        positive("joint_torque_limit", self.joint_torque_limit)?;
        positive("joint_angle_limit", self.joint_angle_limit)?;
        positive("joint_speed_limit", self.joint_speed_limit)?;
        positive("gravity", self.gravity)?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("robot description: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn total_mass(&self) -> f64 {
        self.segment_masses.iter().sum()
    }

    pub fn torso_mass(&self) -> f64 {
        self.segment_masses[0]
    }

    pub fn link_mass(&self, link: usize) -> f64 {
        self.segment_masses[link + 1]
    }

    /// Gravity acceleration vector in the world frame.
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity)
    }

    /// Hip joint position of leg `l` in the baselink frame.
    pub fn hip_position(&self, leg: usize) -> Vector3<f64> {
        self.hip_rotation(leg) * Vector3::new(self.torso_half_width, 0.0, 0.0)
    }

    /// Mounting orientation of leg `l`: x points away from the torso.
    pub fn hip_rotation(&self, leg: usize) -> Matrix3<f64> {
        rot_z(leg as f64 * FRAC_PI_2)
    }

    /// Maximum reach of a leg from its hip.
    pub fn leg_reach(&self) -> f64 {
        2.0 * self.link_length
    }

    /// Contact corners of the square torso plate in the baselink frame.
    pub fn torso_corners(&self) -> [Vector3<f64>; 4] {
        let a = self.torso_half_width;
        [
            Vector3::new(a, a, 0.0),
            Vector3::new(-a, a, 0.0),
            Vector3::new(-a, -a, 0.0),
            Vector3::new(a, -a, 0.0),
        ]
    }

    /// Indices of the joints of leg `l`: yaw, pitch, yaw, pitch.
    pub fn leg_joints(leg: usize) -> [usize; 4] {
        [4 * leg, 4 * leg + 1, 4 * leg + 2, 4 * leg + 3]
    }

    /// Indices of the two links (and rotors) of leg `l`.
    pub fn leg_links(leg: usize) -> [usize; 2] {
        [2 * leg, 2 * leg + 1]
    }

    pub fn leg_of_link(link: usize) -> usize {
        link / 2
    }
}

/// Joint configurations used for the midair experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlightForm {
    /// All joints at zero.
    Flat,
    /// First pitch 30°, second pitch 60°: the outer links hang vertically.
    Bent,
    /// First pitch 45°, second pitch 90°: outer rotors sit directly below inner rotors.
    Folded,
}

impl FlightForm {
    pub fn from_index(index: u8) -> Option<Self> {
        match index {
            1 => Some(Self::Flat),
            2 => Some(Self::Bent),
            3 => Some(Self::Folded),
            _ => None,
        }
    }

    pub fn joint_angles(self) -> JointVector {
        let (p1, p2) = match self {
            Self::Flat => (0.0, 0.0),
            Self::Bent => (30f64.to_radians(), 60f64.to_radians()),
            Self::Folded => (45f64.to_radians(), 90f64.to_radians()),
        };
        let mut q = JointVector::zeros();
        for leg in 0..N_LEGS {
            q[4 * leg + 1] = p1;
            q[4 * leg + 3] = p2;
        }
        q
    }
}

/// Full configuration of the robot at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    /// Joint angles [rad].
    pub q: JointVector,
    /// Joint rates [rad/s]; zero under the quasi-static assumption.
    pub q_dot: JointVector,
    /// CoG position in the world frame [m].
    pub position: Vector3<f64>,
    /// CoG velocity in the world frame [m/s].
    pub velocity: Vector3<f64>,
    /// Orientation of `{CoG}` w.r.t. the world.
    pub rotation: Rotation3<f64>,
    /// Body angular velocity in `{CoG}` [rad/s].
    pub angular_velocity: Vector3<f64>,
}

impl RobotState {
    pub fn at_rest(q: JointVector) -> Self {
        Self {
            q,
            q_dot: JointVector::zeros(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            rotation: Rotation3::identity(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let r = self.rotation.matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::InvalidState(format!("rotation not orthonormal (error {err:.3e})")));
        }
        if let Some(j) = (0..N_JOINTS).find(|&j| self.q[j].abs() > model.joint_angle_limit + 1e-12) {
            return Err(Error::JointLimit { joint: j, value: self.q[j], limit: model.joint_angle_limit });
        }
        Ok(())
    }
}

/// Coordinate frame a wrench is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    World,
    Baselink,
    CoG,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub frame: Frame,
}

impl Wrench {
    pub fn zero(frame: Frame) -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros(), frame }
    }

    pub fn from_vector(v: &Vector6<f64>, frame: Frame) -> Self {
        Self { force: v.fixed_rows::<3>(0).into(), torque: v.fixed_rows::<3>(3).into(), frame }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<3>(3).copy_from(&self.torque);
        v
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Thrust direction of a rotor module in its link frame.
///
/// `phi` rolls the apparatus about the link rod, `theta` then tilts it about
/// the orthogonal axis: `u = [sin θ, -sin φ cos θ, cos φ cos θ]`.
pub fn rotor_direction(phi: f64, theta: f64) -> Vector3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Vector3::new(st, -sp * ct, cp * ct)
}

/// Result of forward kinematics for one joint configuration.
///
/// Positions suffixed `_base` are expressed in the baselink frame; the
/// `*_from_cog` accessors give them relative to the CoG. Every Jacobian maps
/// joint rates to the linear velocity of a point relative to the baselink.
#[derive(Debug, Clone)]
pub struct KinematicsResult {
    pub total_mass: f64,
    /// CoG in the baselink frame.
    pub cog: Vector3<f64>,
    pub joint_positions: [Vector3<f64>; N_JOINTS],
    pub joint_axes: [Vector3<f64>; N_JOINTS],
    /// Link frame orientations w.r.t. `{CoG}`.
    pub link_rotations: [Matrix3<f64>; N_LINKS],
    pub rotors_base: [Vector3<f64>; N_ROTORS],
    pub segments_base: [Vector3<f64>; N_SEGMENTS],
    pub feet_base: [Vector3<f64>; N_LEGS],
    pub rotor_jacobians: [Jacobian; N_ROTORS],
    pub segment_jacobians: [Jacobian; N_SEGMENTS],
    pub foot_jacobians: [Jacobian; N_LEGS],
    /// Composite inertia about the CoG, `{CoG}` axes.
    pub inertia: Matrix3<f64>,
    /// Joints outside the angle limit. Reported, never fatal.
    pub limit_violations: Vec<usize>,
}

impl KinematicsResult {
    pub fn rotor_from_cog(&self, i: usize) -> Vector3<f64> {
        self.rotors_base[i] - self.cog
    }

    pub fn segment_from_cog(&self, s: usize) -> Vector3<f64> {
        self.segments_base[s] - self.cog
    }

    /// World position of a baselink-frame point for the given state.
    pub fn to_world(&self, state: &RobotState, p_base: &Vector3<f64>) -> Vector3<f64> {
        state.position + state.rotation * (p_base - self.cog)
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &JointVector) -> KinematicsResult {
    let l = model.link_length;
    let x = Vector3::x();
    let mut joint_positions = [Vector3::zeros(); N_JOINTS];
    let mut joint_axes = [Vector3::zeros(); N_JOINTS];
    let mut link_rotations = [Matrix3::identity(); N_LINKS];
    let mut rotors_base = [Vector3::zeros(); N_ROTORS];
    let mut segments_base = [Vector3::zeros(); N_SEGMENTS];
    let mut feet_base = [Vector3::zeros(); N_LEGS];

    for leg in 0..N_LEGS {
        let mut rot = model.hip_rotation(leg);
        let mut pos = model.hip_position(leg);
        for (k, link) in RobotModel::leg_links(leg).into_iter().enumerate() {
            let yaw = 4 * leg + 2 * k;
            let pitch = yaw + 1;
            joint_positions[yaw] = pos;
            joint_axes[yaw] = rot * Vector3::z();
            rot *= rot_z(q[yaw]);
            joint_positions[pitch] = pos;
            joint_axes[pitch] = rot * Vector3::y();
            rot *= rot_y(q[pitch]);
            link_rotations[link] = rot;
            rotors_base[link] = pos + rot * (x * model.rotor_offset);
            segments_base[link + 1] = pos + rot * (x * (0.5 * l));
            pos += rot * (x * l);
        }
        feet_base[leg] = pos;
    }

    let chain = |point: &Vector3<f64>, joints: std::ops::Range<usize>| {
        let mut jac = Jacobian::zeros();
        for j in joints {
            let col = joint_axes[j].cross(&(point - joint_positions[j]));
            jac.set_column(j, &col);
        }
        jac
    };

    let mut rotor_jacobians = [Jacobian::zeros(); N_ROTORS];
    let mut segment_jacobians = [Jacobian::zeros(); N_SEGMENTS];
    for link in 0..N_LINKS {
        let leg = RobotModel::leg_of_link(link);
        let last = 4 * leg + if link % 2 == 0 { 2 } else { 4 };
        rotor_jacobians[link] = chain(&rotors_base[link], 4 * leg..last);
        segment_jacobians[link + 1] = chain(&segments_base[link + 1], 4 * leg..last);
    }
    let foot_jacobians: [Jacobian; N_LEGS] = std::array::from_fn(|leg| chain(&feet_base[leg], 4 * leg..4 * leg + 4));

    let total_mass = model.total_mass();
    let cog = segments_base
        .iter()
        .zip(&model.segment_masses)
        .fold(Vector3::zeros(), |acc, (p, m)| acc + p * *m)
        / total_mass;

    let inertia = composite_inertia_about(model, &segments_base, &link_rotations, &cog);

    let limit_violations = (0..N_JOINTS).filter(|&j| q[j].abs() > model.joint_angle_limit + 1e-12).collect();

    KinematicsResult {
        total_mass,
        cog,
        joint_positions,
        joint_axes,
        link_rotations,
        rotors_base,
        segments_base,
        feet_base,
        rotor_jacobians,
        segment_jacobians,
        foot_jacobians,
        inertia,
        limit_violations,
    }
}

fn composite_inertia_about(
    model: &RobotModel,
    segments_base: &[Vector3<f64>; N_SEGMENTS],
    link_rotations: &[Matrix3<f64>; N_LINKS],
    cog: &Vector3<f64>,
) -> Matrix3<f64> {
    let mut inertia = Matrix3::zeros();
    for (p, m) in segments_base.iter().zip(&model.segment_masses) {
        let d = p - cog;
        inertia += *m * (Matrix3::identity() * d.norm_squared() - d * d.transpose());
    }
    // Torso: thin square plate with side 2a.
    let a = model.torso_half_width;
    inertia += model.torso_mass() * a * a / 3.0 * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0));
    if model.rod_inertia {
        let l = model.link_length;
        for (link, rot) in link_rotations.iter().enumerate() {
            let e = rot.column(0);
            inertia += model.link_mass(link) * l * l / 12.0 * (Matrix3::identity() - e * e.transpose());
        }
    }
    inertia
}

/// Composite inertia about the CoG for a joint configuration.
pub fn composite_inertia(model: &RobotModel, q: &JointVector) -> Matrix3<f64> {
    forward_kinematics(model, q).inertia
}

/// Stacked thrust wrench of all rotors about the CoG, expressed in `{CoG}`.
pub fn total_wrench(kin: &KinematicsResult, thrust: &[f64], phi: &[f64], theta: &[f64]) -> Wrench {
    let mut w = Wrench::zero(Frame::CoG);
    for i in 0..N_ROTORS {
        let f = kin.link_rotations[i] * rotor_direction(phi[i], theta[i]) * thrust[i];
        w.force += f;
        w.torque += kin.rotor_from_cog(i).cross(&f);
    }
    w
}
