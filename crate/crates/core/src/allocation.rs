//! Thrust / joint-torque allocation.
//!
//! Every mode solves the same kind of program: minimise
//! `w1 Σ‖f_i‖² + w2 ‖τ_q‖²` over rotor forces `f_i` (in `{CoG}`) and joint
//! torques, subject to quasi-static joint equilibrium, box bounds and a
//! mode-specific balance condition:
//!
//! * flight: the rotor wrench about the CoG equals the desired wrench, plus
//!   the interference constraints of the restricted rotors;
//! * leg lift: only the lifted legs' chains, torso assumed grounded;
//! * all-legs lift: the torso rests on the ground and the implied contact
//!   wrench must stay inside [`ContactWrenchBounds`];
//! * torso support: the torso is held by the four feet, whose contact forces
//!   are extra variables with a friction pyramid.

use std::ops::AddAssign;
use std::time::Duration;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interference::{force_constraints, VectoringRange};
use crate::model::{JointVector, KinematicsResult, RobotModel, Wrench, Frame, N_JOINTS, N_LEGS, N_ROTORS, N_SEGMENTS};
use crate::qp::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, WarmStart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    Flight,
    LegLift,
    AllLegsLift,
    TorsoSupport,
}

impl AllocationMode {
    pub fn name(self) -> &'static str {
        match self {
            AllocationMode::Flight => "flight",
            AllocationMode::LegLift => "leg-lift",
            AllocationMode::AllLegsLift => "all-legs-lift",
            AllocationMode::TorsoSupport => "torso-support",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Command of one rotor module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RotorCommand {
    /// Thrust magnitude [N].
    pub lambda: f64,
    pub phi: f64,
    pub theta: f64,
    /// Thrust force in `{CoG}` [N].
    pub force: Vector3<f64>,
}

impl Default for RotorCommand {
    fn default() -> Self {
        Self { lambda: 0.0, phi: 0.0, theta: 0.0, force: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationWeights {
    /// Thrust weight.
    pub w1: f64,
    /// Joint-torque weight.
    pub w2: f64,
}

impl Default for AllocationWeights {
    fn default() -> Self {
        // A small torque weight lets the rotors carry the link weight instead of
        // the joints, which keeps the hover thrusts equal.
        Self { w1: 1.0, w2: 0.01 }
    }
}

impl AllocationWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("w1", self.w1), ("w2", self.w2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("weight must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Admissible torso contact wrench `[f; τ]` about the baselink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactWrenchBounds {
    pub f_xy: f64,
    pub tau_xy: f64,
    pub tau_z: f64,
}

impl ContactWrenchBounds {
    /// Friction coefficient 0.5 on the torso weight, tilting moment from the
    /// torso weight over the plate half-width.
    pub fn for_model(model: &RobotModel) -> Self {
        let weight = model.torso_mass() * model.gravity;
        let f_xy = 0.5 * weight;
        Self { f_xy, tau_xy: weight * model.torso_half_width, tau_z: f_xy * model.torso_half_width }
    }

    pub fn lower(&self) -> Vector6<f64> {
        Vector6::new(-self.f_xy, -self.f_xy, 0.0, -self.tau_xy, -self.tau_xy, -self.tau_z)
    }

    pub fn upper(&self) -> Vector6<f64> {
        Vector6::new(self.f_xy, self.f_xy, f64::INFINITY, self.tau_xy, self.tau_xy, self.tau_z)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("f_xy", self.f_xy), ("tau_xy", self.tau_xy), ("tau_z", self.tau_z)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("bound must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Components of `w` outside the bounds (with tolerance).
    pub fn violations(&self, w: &Vector6<f64>, tol: f64) -> Vec<usize> {
        let (lo, hi) = (self.lower(), self.upper());
        (0..6).filter(|&k| w[k] < lo[k] - tol || w[k] > hi[k] + tol).collect()
    }
}

/// Inverse map of a link-frame force to `(λ, φ, θ)`.
///
/// A zero force keeps the previous angles; a force along the link x-axis
/// keeps the previous φ.
pub fn forces_to_commands(f_link: &Vector3<f64>, previous_phi: f64, previous_theta: f64) -> (f64, f64, f64) {
    let lambda = f_link.norm();
    if lambda <= 1e-12 {
        return (0.0, previous_phi, previous_theta);
    }
    let phi = if f_link.y.hypot(f_link.z) <= 1e-9 * lambda { previous_phi } else { (-f_link.y).atan2(f_link.z) };
    let (sp, cp) = phi.sin_cos();
    let theta = f_link.x.atan2(-f_link.y * sp + f_link.z * cp);
    (lambda, phi, theta)
}

/// Result of one allocation.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub mode: AllocationMode,
    pub commands: [RotorCommand; N_ROTORS],
    pub joint_torques: JointVector,
    /// Foot contact forces (torso support only), baselink frame.
    pub foot_forces: [Vector3<f64>; N_LEGS],
    /// Torso contact wrench about the baselink (all-legs lift only).
    pub contact_wrench: Option<Vector6<f64>>,
    /// Max-norm violation of the balance equality (flight: rotor wrench vs desired).
    pub wrench_residual: f64,
    /// Max-norm violation of joint equilibrium.
    pub joint_residual: f64,
    /// Rotors whose thrust norm exceeds the limit (the QP only bounds components).
    pub norm_violations: Vec<usize>,
    pub iterations: usize,
    pub solve_time: Duration,
    pub polished: bool,
}

impl Allocation {
    pub fn total_thrust(&self) -> f64 {
        self.commands.iter().map(|c| c.lambda).sum()
    }

    /// Rotor wrench about the CoG, `{CoG}` frame.
    pub fn rotor_wrench(&self, kin: &KinematicsResult) -> Vector6<f64> {
        let mut w = Vector6::zeros();
        for (i, c) in self.commands.iter().enumerate() {
            w.fixed_rows_mut::<3>(0).add_assign(&c.force);
            w.fixed_rows_mut::<3>(3).add_assign(&kin.rotor_from_cog(i).cross(&c.force));
        }
        w
    }
}


/// Variable layout of one program.
struct Layout {
    rotors: Vec<usize>,
    joints: Vec<usize>,
    feet: usize,
}

impl Layout {
    fn n(&self) -> usize {
        3 * self.rotors.len() + self.joints.len() + 3 * self.feet
    }
    fn tau_offset(&self) -> usize {
        3 * self.rotors.len()
    }
    fn foot_offset(&self) -> usize {
        3 * self.rotors.len() + self.joints.len()
    }
}

struct Rows {
    a: Vec<DVector<f64>>,
    b: Vec<f64>,
    c: Vec<DVector<f64>>,
    l: Vec<f64>,
    u: Vec<f64>,
    /// Labels of the inequality rows, for infeasibility reports.
    labels: Vec<String>,
}

impl Rows {
    fn new() -> Self {
        Self { a: vec![], b: vec![], c: vec![], l: vec![], u: vec![], labels: vec![] }
    }
    fn eq(&mut self, row: DVector<f64>, rhs: f64) {
        self.a.push(row);
        self.b.push(rhs);
    }
    fn ineq(&mut self, row: DVector<f64>, lo: f64, hi: f64, label: String) {
        self.c.push(row);
        self.l.push(lo);
        self.u.push(hi);
        self.labels.push(label);
    }
    fn stack(rows: &[DVector<f64>], n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), n, |r, k| rows[r][k])
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    v.cross_matrix()
}

/// Gravity load on the joints, `-Σ J_sᵀ m_s g` with `g` in the body frame.
fn gravity_joint_load(model: &RobotModel, kin: &KinematicsResult, g_body: &Vector3<f64>) -> JointVector {
    let mut load = JointVector::zeros();
    for s in 0..N_SEGMENTS {
        load -= kin.segment_jacobians[s].transpose() * (g_body * model.segment_masses[s]);
    }
    load
}

/// Gravity wrench about the baselink origin.
fn gravity_wrench_base(model: &RobotModel, kin: &KinematicsResult, g_body: &Vector3<f64>) -> Vector6<f64> {
    let mut w = Vector6::zeros();
    for s in 0..N_SEGMENTS {
        let f = g_body * model.segment_masses[s];
        w.fixed_rows_mut::<3>(0).add_assign(&f);
        w.fixed_rows_mut::<3>(3).add_assign(&kin.segments_base[s].cross(&f));
    }
    w
}

/// Allocator for one control loop; keeps one warm start per mode and the
/// previous rotor angles for the degenerate cases of the inverse map.
#[derive(Debug, Clone)]
pub struct Allocator {
    pub weights: AllocationWeights,
    pub contact_bounds: ContactWrenchBounds,
    /// Friction coefficient of the feet in torso support.
    pub foot_friction: f64,
    /// Cost on foot forces in torso support.
    pub foot_force_weight: f64,
    solver: QpSolver,
    warm: [Option<WarmStart>; 4],
    previous: [RotorCommand; N_ROTORS],
}

impl Allocator {
    pub fn new(model: &RobotModel, weights: AllocationWeights) -> Self {
        Self {
            weights,
            contact_bounds: ContactWrenchBounds::for_model(model),
            foot_friction: 0.5,
            foot_force_weight: 1e-6,
            solver: QpSolver::new(QpSettings::default()),
            warm: Default::default(),
            previous: [RotorCommand::default(); N_ROTORS],
        }
    }

    pub fn with_solver_settings(mut self, settings: QpSettings) -> Self {
        self.solver = QpSolver::new(settings);
        self
    }

    /// Forget warm starts and previous angles.
    pub fn reset(&mut self) {
        self.warm = Default::default();
        self.previous = [RotorCommand::default(); N_ROTORS];
    }

    pub fn previous_commands(&self) -> &[RotorCommand; N_ROTORS] {
        &self.previous
    }

    /// Flight allocation. `restricted` holds the vectoring ranges whose
    /// interference constraints are imposed (pass an empty slice to drop them).
    pub fn allocate_flight(
        &mut self,
        model: &RobotModel,
        kin: &KinematicsResult,
        rotation: &Rotation3<f64>,
        desired: &Wrench,
        restricted: &[&VectoringRange],
    ) -> Result<Allocation> {
        if desired.frame != Frame::CoG {
            return Err(Error::InvalidState("desired wrench must be expressed in {CoG}".into()));
        }
        let wd = desired.to_vector();
        if wd.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("desired wrench is not finite".into()));
        }
        let layout = Layout { rotors: (0..N_ROTORS).collect(), joints: (0..N_JOINTS).collect(), feet: 0 };
        let n = layout.n();
        let g_body = rotation.inverse() * model.gravity_vector();
        let mut rows = Rows::new();

        for k in 0..3 {
            let mut force_row = DVector::zeros(n);
            let mut torque_row = DVector::zeros(n);
            for (slot, &i) in layout.rotors.iter().enumerate() {
                force_row[3 * slot + k] = 1.0;
                let s = skew(&kin.rotor_from_cog(i));
                for c in 0..3 {
                    torque_row[3 * slot + c] = s[(k, c)];
                }
            }
            rows.eq(force_row, wd[k]);
            rows.eq(torque_row, wd[3 + k]);
        }
        self.joint_rows(model, kin, &g_body, &layout, &mut rows);
        for range in restricted {
            let fc = force_constraints(range);
            let slot = range.rotor;
            let embed = |v: &Vector3<f64>| {
                let mut r = DVector::zeros(n);
                r.fixed_rows_mut::<3>(3 * slot).copy_from(v);
                r
            };
            rows.eq(embed(&fc.y_row), 0.0);
            rows.ineq(embed(&fc.inf_row), f64::NEG_INFINITY, 0.0, format!("rotor {slot} lower tilt bound"));
            rows.ineq(embed(&fc.sup_row), 0.0, f64::INFINITY, format!("rotor {slot} upper tilt bound"));
        }
        self.box_rows(model, &layout, &mut rows);

        let sol = self.solve(AllocationMode::Flight, &layout, rows)?;
        let mut out = self.decode(AllocationMode::Flight, model, kin, &g_body, &layout, &sol);
        out.wrench_residual = (out.rotor_wrench(kin) - wd).amax();
        Ok(out)
    }

    /// Allocation for lifting the legs in `legs` while the torso is grounded.
    /// Rotors and joints of the other legs are left at zero.
    pub fn allocate_leg_lift(&mut self, model: &RobotModel, kin: &KinematicsResult, rotation: &Rotation3<f64>, legs: &[usize]) -> Result<Allocation> {
        if legs.is_empty() || legs.iter().any(|&l| l >= N_LEGS) {
            return Err(Error::InvalidState(format!("invalid leg set {legs:?}")));
        }
        let mut legs = legs.to_vec();
        legs.sort_unstable();
        legs.dedup();
        let layout = Layout {
            rotors: legs.iter().flat_map(|&l| RobotModel::leg_links(l)).collect(),
            joints: legs.iter().flat_map(|&l| RobotModel::leg_joints(l)).collect(),
            feet: 0,
        };
        let g_body = rotation.inverse() * model.gravity_vector();
        let mut rows = Rows::new();
        self.joint_rows(model, kin, &g_body, &layout, &mut rows);
        self.box_rows(model, &layout, &mut rows);
        let sol = self.solve(AllocationMode::LegLift, &layout, rows)?;
        Ok(self.decode(AllocationMode::LegLift, model, kin, &g_body, &layout, &sol))
    }

    /// Allocation with the torso resting on the ground and every leg lifted.
    pub fn allocate_all_legs_lift(&mut self, model: &RobotModel, kin: &KinematicsResult, rotation: &Rotation3<f64>) -> Result<Allocation> {
        let layout = Layout { rotors: (0..N_ROTORS).collect(), joints: (0..N_JOINTS).collect(), feet: 0 };
        let n = layout.n();
        let g_body = rotation.inverse() * model.gravity_vector();
        let mut rows = Rows::new();
        self.joint_rows(model, kin, &g_body, &layout, &mut rows);

        // w_c = -Σ [f; p×f] - gravity wrench, all about the baselink.
        let gw = gravity_wrench_base(model, kin, &g_body);
        let (lo, hi) = (self.contact_bounds.lower(), self.contact_bounds.upper());
        const NAMES: [&str; 6] = ["force x", "force y", "force z", "moment x", "moment y", "moment z"];
        for k in 0..6 {
            let mut row = DVector::zeros(n);
            for (slot, &i) in layout.rotors.iter().enumerate() {
                for c in 0..3 {
                    row[3 * slot + c] = if k < 3 {
                        if c == k { -1.0 } else { 0.0 }
                    } else {
                        -skew(&kin.rotors_base[i])[(k - 3, c)]
                    };
                }
            }
            rows.ineq(row, lo[k] + gw[k], hi[k] + gw[k], format!("contact {}", NAMES[k]));
        }
        self.box_rows(model, &layout, &mut rows);
        let sol = self.solve(AllocationMode::AllLegsLift, &layout, rows)?;
        let mut out = self.decode(AllocationMode::AllLegsLift, model, kin, &g_body, &layout, &sol);
        let wc = contact_wrench(kin, &out.commands, &gw);
        out.wrench_residual = self.contact_bounds.violations(&wc, 1e-6).iter().map(|&k| {
            (wc[k] - wc[k].clamp(lo[k], hi[k])).abs()
        }).fold(0.0, f64::max);
        out.contact_wrench = Some(wc);
        Ok(out)
    }

    /// Allocation with the torso held up by the four feet, which stay pinned.
    pub fn allocate_torso_support(&mut self, model: &RobotModel, kin: &KinematicsResult, rotation: &Rotation3<f64>) -> Result<Allocation> {
        let layout = Layout { rotors: (0..N_ROTORS).collect(), joints: (0..N_JOINTS).collect(), feet: N_LEGS };
        let n = layout.n();
        let g_body = rotation.inverse() * model.gravity_vector();
        let mut rows = Rows::new();
        self.joint_rows(model, kin, &g_body, &layout, &mut rows);

        // Whole-body statics about the baselink: thrust + feet + gravity = 0.
        let gw = gravity_wrench_base(model, kin, &g_body);
        let fo = layout.foot_offset();
        for k in 0..6 {
            let mut row = DVector::zeros(n);
            let mut put = |offset: usize, p: &Vector3<f64>| {
                for c in 0..3 {
                    row[offset + c] = if k < 3 { if c == k { 1.0 } else { 0.0 } } else { skew(p)[(k - 3, c)] };
                }
            };
            for (slot, &i) in layout.rotors.iter().enumerate() {
                put(3 * slot, &kin.rotors_base[i]);
            }
            for leg in 0..N_LEGS {
                put(fo + 3 * leg, &kin.feet_base[leg]);
            }
            rows.eq(row, -gw[k]);
        }
        // Friction pyramid in the world frame, feet on level ground.
        let r = rotation.matrix();
        let up = r.transpose() * Vector3::z();
        for leg in 0..N_LEGS {
            let mut normal = DVector::zeros(n);
            normal.fixed_rows_mut::<3>(fo + 3 * leg).copy_from(&up);
            rows.ineq(normal.clone(), 0.0, f64::INFINITY, format!("foot {leg} normal force"));
            for axis in [Vector3::x(), Vector3::y()] {
                let t = r.transpose() * axis;
                for sign in [1.0, -1.0] {
                    let mut row = DVector::zeros(n);
                    row.fixed_rows_mut::<3>(fo + 3 * leg).copy_from(&(t * sign - up * self.foot_friction));
                    rows.ineq(row, f64::NEG_INFINITY, 0.0, format!("foot {leg} friction"));
                }
            }
        }
        self.box_rows(model, &layout, &mut rows);
        let sol = self.solve(AllocationMode::TorsoSupport, &layout, rows)?;
        let mut out = self.decode(AllocationMode::TorsoSupport, model, kin, &g_body, &layout, &sol);
        let mut total = gw;
        for (i, c) in out.commands.iter().enumerate() {
            total.fixed_rows_mut::<3>(0).add_assign(&c.force);
            total.fixed_rows_mut::<3>(3).add_assign(&kin.rotors_base[i].cross(&c.force));
        }
        for (leg, f) in out.foot_forces.iter().enumerate() {
            total.fixed_rows_mut::<3>(0).add_assign(f);
            total.fixed_rows_mut::<3>(3).add_assign(&kin.feet_base[leg].cross(f));
        }
        out.wrench_residual = total.amax();
        Ok(out)
    }

    /// `τ_j + Σ (J_rᵀ f)_j + Σ (J_footᵀ F)_j = -Σ (J_sᵀ m g)_j` for the layout's joints.
    fn joint_rows(&self, model: &RobotModel, kin: &KinematicsResult, g_body: &Vector3<f64>, layout: &Layout, rows: &mut Rows) {
        let n = layout.n();
        let load = gravity_joint_load(model, kin, g_body);
        for (jslot, &j) in layout.joints.iter().enumerate() {
            let mut row = DVector::zeros(n);
            row[layout.tau_offset() + jslot] = 1.0;
            for (slot, &i) in layout.rotors.iter().enumerate() {
                for c in 0..3 {
                    row[3 * slot + c] = kin.rotor_jacobians[i][(c, j)];
                }
            }
            for leg in 0..layout.feet {
                for c in 0..3 {
                    row[layout.foot_offset() + 3 * leg + c] = kin.foot_jacobians[leg][(c, j)];
                }
            }
            rows.eq(row, load[j]);
        }
    }

    fn box_rows(&self, model: &RobotModel, layout: &Layout, rows: &mut Rows) {
        let n = layout.n();
        for k in 0..layout.tau_offset() {
            let mut row = DVector::zeros(n);
            row[k] = 1.0;
            let rotor = layout.rotors[k / 3];
            rows.ineq(row, -model.thrust_limit, model.thrust_limit, format!("rotor {rotor} thrust limit"));
        }
        for (jslot, &j) in layout.joints.iter().enumerate() {
            let mut row = DVector::zeros(n);
            row[layout.tau_offset() + jslot] = 1.0;
            rows.ineq(row, -model.joint_torque_limit, model.joint_torque_limit, format!("joint {j} torque limit"));
        }
    }

    fn solve(&mut self, mode: AllocationMode, layout: &Layout, rows: Rows) -> Result<QpSolution> {
        let n = layout.n();
        let mut p = DMatrix::zeros(n, n);
        for k in 0..n {
            p[(k, k)] = if k < layout.tau_offset() {
                2.0 * self.weights.w1
            } else if k < layout.foot_offset() {
                2.0 * self.weights.w2
            } else {
                2.0 * self.foot_force_weight
            };
        }
        let problem = QpProblem::new(p)
            .with_equalities(Rows::stack(&rows.a, n), DVector::from_vec(rows.b))
            .with_inequalities(Rows::stack(&rows.c, n), DVector::from_vec(rows.l.clone()), DVector::from_vec(rows.u.clone()));
        let sol = self.solver.solve(&problem, self.warm[mode.index()].as_ref())?;
        match sol.status {
            QpStatus::Optimal => {
                self.warm[mode.index()] = Some(WarmStart::from_solution(&sol));
                Ok(sol)
            }
            QpStatus::Infeasible => {
                // Rows carrying the largest multipliers of the certificate bind.
                let mut binding: Vec<(f64, &str)> = sol
                    .y_ineq
                    .iter()
                    .zip(&rows.labels)
                    .filter(|(y, _)| y.abs() > 1e-9)
                    .map(|(y, l)| (y.abs(), l.as_str()))
                    .collect();
                binding.sort_by(|a, b| b.0.total_cmp(&a.0));
                let names: Vec<&str> = binding.iter().take(4).map(|(_, l)| *l).collect();
                self.warm[mode.index()] = None;
                Err(Error::Infeasible {
                    mode: mode.name(),
                    detail: if names.is_empty() { "equality constraints inconsistent".into() } else { format!("binding: {}", names.join(", ")) },
                })
            }
            QpStatus::MaxIter => {
                self.warm[mode.index()] = None;
                Err(Error::NotConverged { mode: mode.name(), iterations: sol.iterations })
            }
        }
    }

    fn decode(
        &mut self,
        mode: AllocationMode,
        model: &RobotModel,
        kin: &KinematicsResult,
        g_body: &Vector3<f64>,
        layout: &Layout,
        sol: &QpSolution,
    ) -> Allocation {
        let x = &sol.x;
        let mut commands = [RotorCommand::default(); N_ROTORS];
        for (i, cmd) in commands.iter_mut().enumerate() {
            cmd.phi = self.previous[i].phi;
            cmd.theta = self.previous[i].theta;
        }
        for (slot, &i) in layout.rotors.iter().enumerate() {
            let f = Vector3::new(x[3 * slot], x[3 * slot + 1], x[3 * slot + 2]);
            let f_link = kin.link_rotations[i].transpose() * f;
            let (lambda, phi, theta) = forces_to_commands(&f_link, self.previous[i].phi, self.previous[i].theta);
            commands[i] = RotorCommand { lambda, phi, theta, force: f };
        }
        let mut joint_torques = JointVector::zeros();
        for (jslot, &j) in layout.joints.iter().enumerate() {
            joint_torques[j] = x[layout.tau_offset() + jslot];
        }
        let mut foot_forces = [Vector3::zeros(); N_LEGS];
        for (leg, f) in foot_forces.iter_mut().enumerate().take(layout.feet) {
            let o = layout.foot_offset() + 3 * leg;
            *f = Vector3::new(x[o], x[o + 1], x[o + 2]);
        }

        // Joint equilibrium residual over the joints of the program.
        let mut lhs = joint_torques;
        for &i in &layout.rotors {
            lhs += kin.rotor_jacobians[i].transpose() * commands[i].force;
        }
        for (leg, f) in foot_forces.iter().enumerate() {
            lhs += kin.foot_jacobians[leg].transpose() * f;
        }
        let residual = lhs - gravity_joint_load(model, kin, g_body);
        let joint_residual = layout.joints.iter().map(|&j| residual[j].abs()).fold(0.0, f64::max);

        let norm_violations: Vec<usize> =
            (0..N_ROTORS).filter(|&i| commands[i].lambda > model.thrust_limit * (1.0 + 1e-9)).collect();
        if !norm_violations.is_empty() {
            log::warn!("thrust norm above limit on rotors {norm_violations:?}");
        }
        self.previous = commands;
        Allocation {
            mode,
            commands,
            joint_torques,
            foot_forces,
            contact_wrench: None,
            wrench_residual: 0.0,
            joint_residual,
            norm_violations,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            polished: sol.polished,
        }
    }
}

/// Torso contact wrench implied by the rotor forces, `-Σ[f; p×f] - gravity wrench`.
pub fn contact_wrench(kin: &KinematicsResult, commands: &[RotorCommand; N_ROTORS], gravity_wrench: &Vector6<f64>) -> Vector6<f64> {
    let mut w = -gravity_wrench;
    for (i, c) in commands.iter().enumerate() {
        w.fixed_rows_mut::<3>(0).add_assign(&(-c.force));
        w.fixed_rows_mut::<3>(3).add_assign(&(-kin.rotors_base[i].cross(&c.force)));
    }
    w
}

/// Gravity wrench of the whole robot about the baselink for a body orientation.
pub fn gravity_wrench(model: &RobotModel, kin: &KinematicsResult, rotation: &Rotation3<f64>) -> Vector6<f64> {
    gravity_wrench_base(model, kin, &(rotation.inverse() * model.gravity_vector()))
}
