//! Quasi-static closed-loop simulation.
//!
//! Flight integrates the centroidal rigid-body equations with semi-implicit
//! Euler; joints follow their targets through a rate-limited first-order
//! servo. Crawling is kinematic: the torso is pinned on the ground while the
//! legs move and is fitted to the pinned feet while it moves; the implied
//! contact wrench is checked against its bounds instead of simulating
//! tipping.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use nalgebra::{Matrix3, Rotation3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{gravity_wrench, contact_wrench, Allocation, Allocator, ContactWrenchBounds, RotorCommand};
use crate::config::{Mode, ScenarioConfig};
use crate::control::{joint_pd, FlightController, Setpoint};
use crate::error::{Error, Result};
use crate::gait::{GaitPhase, GaitPlanner};
use crate::interference::{aligned_frame, downwash_blocked, restricted_set, tilt_in_frame, valid_range, DownwashModel, Obstacle, RotorPose, VectoringRange};
use crate::model::{forward_kinematics, rotor_direction, FlightForm, JointVector, KinematicsResult, RobotModel, RobotState, N_JOINTS, N_LEGS, N_ROTORS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Control and integration step [s].
    pub dt: f64,
    /// Time constant of the joint servo lag [s].
    pub servo_time_constant: f64,
    /// Amplitude of the uniform force disturbance per axis [N].
    pub disturbance_force: f64,
    /// Amplitude of the uniform torque disturbance per axis [N m].
    pub disturbance_torque: f64,
    /// Fraction of thrust lost by a rotor sitting in another rotor's downwash.
    pub downwash_thrust_loss: f64,
    /// Upper bound on the simulated time of a crawl [s].
    pub max_crawl_time: f64,
    /// Write per-tick solve times into the CSV (makes it non-reproducible).
    pub record_timing: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.025,
            servo_time_constant: 0.1,
            disturbance_force: 0.5,
            disturbance_torque: 0.05,
            downwash_thrust_loss: 0.3,
            max_crawl_time: 600.0,
            record_timing: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if !(self.servo_time_constant.is_finite() && self.servo_time_constant > 0.0) {
            return Err(Error::invalid("servo_time_constant", "must be positive"));
        }
        for (field, v) in [("disturbance_force", self.disturbance_force), ("disturbance_torque", self.disturbance_torque)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(field, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.downwash_thrust_loss) {
            return Err(Error::invalid("downwash_thrust_loss", "must lie in [0, 1]"));
        }
        if !(self.max_crawl_time >= self.dt) {
            return Err(Error::invalid("max_crawl_time", "must be at least dt"));
        }
        Ok(())
    }
}

/// Hold one flight form for a while.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormSegment {
    /// 1 = flat, 2 = bent, 3 = folded.
    pub form: u8,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlightScenario {
    pub hover_position: [f64; 3],
    pub segments: Vec<FormSegment>,
    /// Time window `[start, end)` during which the interference constraints are dropped.
    pub interference_off: Option<[f64; 2]>,
}

impl Default for FlightScenario {
    fn default() -> Self {
        Self {
            hover_position: [0.0, 0.0, 1.0],
            segments: vec![
                FormSegment { form: 1, duration: 8.0 },
                FormSegment { form: 2, duration: 10.0 },
                FormSegment { form: 3, duration: 10.0 },
            ],
            interference_off: None,
        }
    }
}

impl FlightScenario {
    /// Folded form held throughout, constraints dropped for two seconds.
    pub fn toggle() -> Self {
        Self {
            hover_position: [0.0, 0.0, 1.0],
            segments: vec![FormSegment { form: 3, duration: 8.0 }],
            interference_off: Some([3.0, 5.0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("segments", "at least one segment is required"));
        }
        for s in &self.segments {
            if FlightForm::from_index(s.form).is_none() {
                return Err(Error::invalid("segments", format!("form must be 1, 2 or 3, got {}", s.form)));
            }
            if !(s.duration.is_finite() && s.duration > 0.0) {
                return Err(Error::invalid("segments", "durations must be positive"));
            }
        }
        if let Some([a, b]) = self.interference_off {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::invalid("interference_off", "window must satisfy start < end"));
            }
        }
        if self.hover_position.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("hover_position", "must be finite"));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Index of the segment active at time `t` (last one after the end).
    pub fn segment_at(&self, t: f64) -> usize {
        let mut end = 0.0;
        for (k, s) in self.segments.iter().enumerate() {
            end += s.duration;
            if t < end {
                return k;
            }
        }
        self.segments.len() - 1
    }
}

/// One logged tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub position: Vector3<f64>,
    /// Roll, pitch, yaw of the Z-Y-X convention.
    pub euler: Vector3<f64>,
    pub q: JointVector,
    pub joint_torques: JointVector,
    pub commands: [RotorCommand; N_ROTORS],
    pub e_r: Vector3<f64>,
    pub e_rot: Vector3<f64>,
    pub solve_time: Duration,
    pub violations: usize,
    pub wrench_residual: f64,
    pub joint_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SegmentStats {
    pub form: u8,
    pub position_rmse: f64,
    pub orientation_rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mode: String,
    pub ticks: usize,
    pub duration: f64,
    pub seed: u64,
    pub interference: bool,
    pub position_rmse: f64,
    pub orientation_rmse: f64,
    pub max_position_error: f64,
    pub segments: Vec<SegmentStats>,
    pub max_wrench_residual: f64,
    pub max_joint_residual: f64,
    pub thrust_integral: f64,
    /// Hover thrust `m_Σ g` integrated over the same duration.
    pub hover_thrust_integral: f64,
    pub thrust_ratio: f64,
    pub violations: usize,
    pub norm_violations: usize,
    /// Ticks after the constraints were dropped until a restricted rotor left its range.
    pub toggle_exit_ticks: Option<usize>,
    /// Ticks after the constraints were restored until every restricted rotor was back in range.
    pub toggle_recovery_ticks: Option<usize>,
    pub cycles: usize,
    pub displacement: Option<[f64; 3]>,
    pub cycle_displacements: Vec<f64>,
    /// Largest deviation of the joints at any cycle start from the first cycle start [rad].
    pub cycle_start_joint_spread: Option<f64>,
    pub max_contact_violation: f64,
    pub solve_ms_median: f64,
    pub solve_ms_max: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<TickRecord>,
    pub summary: Summary,
    /// Joint angles at each crawl cycle start (and after the last cycle).
    pub cycle_start_joints: Vec<JointVector>,
    pub cycle_start_torso: Vec<Vector3<f64>>,
    pub keyframes_json: Option<String>,
}

impl Trajectory {
    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["t", "r_x", "r_y", "r_z", "roll", "pitch", "yaw"].iter().map(|s| s.to_string()).collect();
        h.extend((0..N_JOINTS).map(|j| format!("q_{j}")));
        h.extend((0..N_JOINTS).map(|j| format!("tau_{j}")));
        h.extend((0..N_ROTORS).map(|i| format!("lambda_{i}")));
        h.extend((0..N_ROTORS).map(|i| format!("phi_{i}")));
        h.extend((0..N_ROTORS).map(|i| format!("theta_{i}")));
        h.extend(["er_x", "er_y", "er_z", "eR_x", "eR_y", "eR_z", "solve_ms", "violations"].iter().map(|s| s.to_string()));
        h
    }

    /// Write the per-tick CSV. Solve times are left empty unless requested.
    pub fn write_csv<W: Write>(&self, out: W, record_timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header())?;
        for r in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(80);
            row.push(format!("{:.3}", r.t));
            row.extend(r.position.iter().chain(r.euler.iter()).map(fmt));
            row.extend(r.q.iter().chain(r.joint_torques.iter()).map(fmt));
            row.extend(r.commands.iter().map(|c| fmt(&c.lambda)));
            row.extend(r.commands.iter().map(|c| fmt(&c.phi)));
            row.extend(r.commands.iter().map(|c| fmt(&c.theta)));
            row.extend(r.e_r.iter().chain(r.e_rot.iter()).map(fmt));
            row.push(if record_timing { format!("{:.4}", r.solve_time.as_secs_f64() * 1e3) } else { String::new() });
            row.push(r.violations.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_artifacts(&self, dir: &Path, record_timing: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.summary.mode));
        self.write_csv(std::fs::File::create(csv_path)?, record_timing)?;
        let summary = serde_json::to_string_pretty(&self.summary)?;
        std::fs::write(dir.join(format!("{}_summary.json", self.summary.mode)), summary + "\n")?;
        if let Some(k) = &self.keyframes_json {
            std::fs::write(dir.join("keyframes.json"), k)?;
        }
        Ok(())
    }
}

fn fmt(v: &f64) -> String {
    // Nine decimals keep the files compact; the output stays bit-stable for a given build.
    format!("{v:.9}")
}

/// Rate-limited first-order joint servo: `q̇ = clamp((q_d − q)/T, ±v_max)`.
pub fn servo_step(q: &JointVector, q_des: &JointVector, time_constant: f64, speed_limit: f64, dt: f64) -> (JointVector, JointVector) {
    let q_dot = JointVector::from_fn(|j, _| ((q_des[j] - q[j]) / time_constant).clamp(-speed_limit, speed_limit));
    // Never overshoot the target within one step.
    let next = JointVector::from_fn(|j, _| {
        let step = q_dot[j] * dt;
        if step.abs() >= (q_des[j] - q[j]).abs() { q_des[j] } else { q[j] + step }
    });
    (next, (next - q) / dt)
}

/// Per-rotor thrust efficiency: rotors sitting in another rotor's downwash lose `loss`.
/// Also returns the number of (source, victim) pairs in contact.
pub fn downwash_hits(kin: &KinematicsResult, commands: &[RotorCommand; N_ROTORS], downwash: &DownwashModel, loss: f64) -> ([f64; N_ROTORS], usize) {
    let mut eff = [1.0; N_ROTORS];
    let mut hits = 0;
    // A hair inside the clearance radius so thrusts sitting exactly on a range boundary do not count.
    let check = DownwashModel { clearance_radius: downwash.clearance_radius * (1.0 - 1e-3), ..*downwash };
    for (i, c) in commands.iter().enumerate() {
        if c.lambda <= 1e-9 {
            continue;
        }
        let pose = RotorPose { position: kin.rotors_base[i], frame: aligned_frame(&kin.link_rotations[i], c.phi) };
        for j in (0..N_ROTORS).filter(|&j| j != i) {
            if downwash_blocked(&pose, &Obstacle::Point(kin.rotors_base[j]), c.theta, &check) {
                hits += 1;
                eff[j] = 1.0 - loss;
            }
        }
    }
    (eff, hits)
}

/// One semi-implicit Euler step of the flight dynamics. `external` is an extra
/// wrench (world force, body torque) such as a disturbance.
#[allow(clippy::too_many_arguments)]
pub fn step_flight(
    model: &RobotModel,
    state: &RobotState,
    kin: &KinematicsResult,
    commands: &[RotorCommand; N_ROTORS],
    efficiency: &[f64; N_ROTORS],
    q_des: &JointVector,
    external: &Vector6<f64>,
    sim: &SimConfig,
) -> RobotState {
    let dt = sim.dt;
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for (i, c) in commands.iter().enumerate() {
        let f = kin.link_rotations[i] * rotor_direction(c.phi, c.theta) * (c.lambda * efficiency[i]);
        force += f;
        torque += kin.rotor_from_cog(i).cross(&f);
    }
    let mass = kin.total_mass;
    let accel = (state.rotation * force + external.fixed_rows::<3>(0)) / mass + model.gravity_vector();
    let inertia: Matrix3<f64> = kin.inertia;
    let w = state.angular_velocity;
    let tau = torque + external.fixed_rows::<3>(3) - w.cross(&(inertia * w));
    let alpha = inertia.try_inverse().unwrap_or_else(Matrix3::zeros) * tau;

    let mut next = state.clone();
    next.velocity += accel * dt;
    next.position += next.velocity * dt;
    next.angular_velocity += alpha * dt;
    next.rotation = state.rotation * Rotation3::new(next.angular_velocity * dt);
    next.rotation.renormalize();
    let (q, q_dot) = servo_step(&state.q, q_des, sim.servo_time_constant, model.joint_speed_limit, dt);
    next.q = q;
    next.q_dot = q_dot;
    next
}

/// Contact check of one crawl tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactReport {
    /// Torso contact wrench about the baselink (all-legs lift), zero otherwise.
    pub wrench: Vector6<f64>,
    pub violated: bool,
    /// Largest excursion beyond the bounds.
    pub excess: f64,
}

/// Torso contact wrench implied by the commands while the torso rests on
/// the ground, checked against its bounds.
pub fn check_torso_contact(model: &RobotModel, kin: &KinematicsResult, commands: &[RotorCommand; N_ROTORS], bounds: &ContactWrenchBounds) -> ContactReport {
    let gw = gravity_wrench(model, kin, &Rotation3::identity());
    let wrench = contact_wrench(kin, commands, &gw);
    let (lo, hi) = (bounds.lower(), bounds.upper());
    let excess = (0..6).map(|k| (lo[k] - wrench[k]).max(wrench[k] - hi[k]).max(0.0)).fold(0.0, f64::max);
    ContactReport { wrench, violated: excess > 1e-6, excess }
}

/// Kinematic crawl step: joints follow the servo; the torso stays put while
/// it rests on the ground and is fitted to the pinned feet otherwise.
pub fn step_crawl(
    model: &RobotModel,
    state: &RobotState,
    q_des: &JointVector,
    feet: &[Vector3<f64>; N_LEGS],
    torso_on_ground: bool,
    sim: &SimConfig,
) -> RobotState {
    let (q, q_dot) = servo_step(&state.q, q_des, sim.servo_time_constant, model.joint_speed_limit, sim.dt);
    let mut next = state.clone();
    next.q = q;
    next.q_dot = q_dot;
    if !torso_on_ground {
        next.position = fit_torso(model, &q, feet);
    }
    next
}

/// Least-squares torso origin for level orientation and pinned feet.
pub fn fit_torso(model: &RobotModel, q: &JointVector, feet: &[Vector3<f64>; N_LEGS]) -> Vector3<f64> {
    let kin = forward_kinematics(model, q);
    (0..N_LEGS).map(|l| feet[l] - kin.feet_base[l]).sum::<Vector3<f64>>() / N_LEGS as f64
}

fn median_ms(times: &mut [f64]) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn rotation_angle(r: &Rotation3<f64>, rd: &Rotation3<f64>) -> f64 {
    (r.inverse() * rd).angle()
}

/// Is the thrust of a restricted rotor inside its chosen range?
fn in_range(range: &VectoringRange, f: &Vector3<f64>) -> bool {
    let lambda = f.norm();
    if lambda < 1e-9 {
        return true;
    }
    let off_plane = (range.frame.transpose() * f).y.abs();
    let theta = tilt_in_frame(&range.frame, f);
    off_plane <= 1e-6 * lambda.max(1.0) && theta >= range.chosen.lo - 1e-6 && theta <= range.chosen.hi + 1e-6
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    match cfg.mode {
        Mode::Flight => run_flight(cfg, &model),
        Mode::Crawl => run_crawl(cfg, &model),
    }
}

fn run_flight(cfg: &ScenarioConfig, model: &RobotModel) -> Result<Trajectory> {
    let sim = &cfg.sim;
    let scen = &cfg.flight;
    let dt = sim.dt;
    let ticks = (scen.duration() / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let first_form = FlightForm::from_index(scen.segments[0].form).unwrap();
    let mut state = RobotState::at_rest(first_form.joint_angles());
    state.position = Vector3::from(scen.hover_position);
    let setpoint_base = Setpoint::hold(&state);

    let mut controller = FlightController::new(cfg.gains);
    let mut allocator = Allocator::new(model, cfg.weights);
    let mut locked_phi = [0.0; N_ROTORS];
    let mut records = Vec::with_capacity(ticks);
    let mut summary = Summary { mode: "flight".into(), seed: cfg.seed, interference: cfg.use_interference, ..Default::default() };
    let mut seg_acc: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); scen.segments.len()];
    let mut times = Vec::with_capacity(ticks);
    let mut last_q_dot = JointVector::zeros();

    for tick in 0..ticks {
        let t = tick as f64 * dt;
        let seg = scen.segment_at(t);
        let form = FlightForm::from_index(scen.segments[seg].form).unwrap();
        let mut sp = setpoint_base.clone();
        sp.q = form.joint_angles();

        let kin = forward_kinematics(model, &state.q);
        let ranges = valid_range(&kin, &cfg.interference, &locked_phi).map_err(|e| e.at_tick(tick))?;
        for r in &ranges {
            locked_phi[r.rotor] = r.nominal_phi;
        }
        let off = scen.interference_off.is_some_and(|[a, b]| t >= a && t < b);
        let active = cfg.use_interference && !off;
        let restricted_idx = restricted_set(&ranges, cfg.interference.theta_threshold);
        let restricted: Vec<&VectoringRange> = if active { restricted_idx.iter().map(|&i| &ranges[i]).collect() } else { vec![] };

        let (wrench, errors) = controller.desired_wrench(&state, &sp, kin.total_mass, model.gravity, &kin.inertia, dt);
        let alloc = allocator.allocate_flight(model, &kin, &state.rotation, &wrench, &restricted).map_err(|e| e.at_tick(tick))?;

        let (eff, hits) = downwash_hits(&kin, &alloc.commands, &cfg.interference.downwash, sim.downwash_thrust_loss);
        let out_of_range = restricted_idx.iter().any(|&i| !in_range(&ranges[i], &alloc.commands[i].force));
        if let Some([a, b]) = scen.interference_off {
            if t >= a && summary.toggle_exit_ticks.is_none() && out_of_range {
                summary.toggle_exit_ticks = Some(((t - a) / dt).round() as usize);
            }
            if t >= b && summary.toggle_recovery_ticks.is_none() && !out_of_range {
                summary.toggle_recovery_ticks = Some(((t - b) / dt).round() as usize);
            }
        }

        let mut external = Vector6::zeros();
        if sim.disturbance_force > 0.0 || sim.disturbance_torque > 0.0 {
            for k in 0..3 {
                external[k] = rng.random_range(-1.0..=1.0) * sim.disturbance_force;
                external[3 + k] = rng.random_range(-1.0..=1.0) * sim.disturbance_torque;
            }
        }

        let pd = joint_pd(&state.q, &last_q_dot, &sp.q, &cfg.gains, model.joint_torque_limit);
        let tau = (alloc.joint_torques + pd).map(|v| v.clamp(-model.joint_torque_limit, model.joint_torque_limit));
        let euler = state.rotation.euler_angles();
        records.push(TickRecord {
            t,
            position: state.position,
            euler: Vector3::new(euler.0, euler.1, euler.2),
            q: state.q,
            joint_torques: tau,
            commands: alloc.commands,
            e_r: errors.e_r,
            e_rot: errors.e_rot,
            solve_time: alloc.solve_time,
            violations: hits,
            wrench_residual: alloc.wrench_residual,
            joint_residual: alloc.joint_residual,
        });
        times.push(alloc.solve_time.as_secs_f64() * 1e3);
        summary.thrust_integral += alloc.total_thrust() * dt;
        summary.violations += hits;
        summary.norm_violations += alloc.norm_violations.len();
        summary.max_wrench_residual = summary.max_wrench_residual.max(alloc.wrench_residual);
        summary.max_joint_residual = summary.max_joint_residual.max(alloc.joint_residual);
        let pos_err = errors.e_r.norm();
        let rot_err = rotation_angle(&state.rotation, &sp.rotation);
        summary.max_position_error = summary.max_position_error.max(pos_err);
        seg_acc[seg].0 += pos_err * pos_err;
        seg_acc[seg].1 += rot_err * rot_err;
        seg_acc[seg].2 += 1;

        state = step_flight(model, &state, &kin, &alloc.commands, &eff, &sp.q, &external, sim);
        last_q_dot = state.q_dot;
        if !state.position.iter().chain(state.velocity.iter()).chain(state.angular_velocity.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { tick, what: "flight state" });
        }
    }

    let n: usize = seg_acc.iter().map(|s| s.2).sum();
    summary.ticks = n;
    summary.duration = n as f64 * dt;
    summary.position_rmse = (seg_acc.iter().map(|s| s.0).sum::<f64>() / n.max(1) as f64).sqrt();
    summary.orientation_rmse = (seg_acc.iter().map(|s| s.1).sum::<f64>() / n.max(1) as f64).sqrt();
    summary.segments = scen
        .segments
        .iter()
        .zip(&seg_acc)
        .map(|(s, a)| SegmentStats {
            form: s.form,
            position_rmse: (a.0 / a.2.max(1) as f64).sqrt(),
            orientation_rmse: (a.1 / a.2.max(1) as f64).sqrt(),
        })
        .collect();
    summary.hover_thrust_integral = model.total_mass() * model.gravity * summary.duration;
    summary.thrust_ratio = summary.thrust_integral / summary.hover_thrust_integral;
    summary.solve_ms_max = times.iter().copied().fold(0.0, f64::max);
    summary.solve_ms_median = median_ms(&mut times);
    Ok(Trajectory { records, summary, ..Default::default() })
}

fn run_crawl(cfg: &ScenarioConfig, model: &RobotModel) -> Result<Trajectory> {
    let sim = &cfg.sim;
    let dt = sim.dt;
    let mut planner = GaitPlanner::new(model, cfg.gait, cfg.cycles, Vector3::zeros())?;
    let mut state = RobotState::at_rest(planner.initial_joints()?);
    let start_torso = state.position;
    let mut allocator = Allocator::new(model, cfg.weights);
    if let Some(b) = cfg.contact_bounds {
        allocator.contact_bounds = b;
    }
    let bounds = allocator.contact_bounds;
    let max_ticks = (sim.max_crawl_time / dt).ceil() as usize;

    let mut records = Vec::new();
    let mut summary = Summary { mode: "crawl".into(), seed: cfg.seed, interference: false, cycles: cfg.cycles, ..Default::default() };
    let mut cycle_start_joints = vec![state.q];
    let mut cycle_start_torso = vec![state.position];
    let mut times = Vec::new();
    let mut last_cycle = 0;
    let mut tick = 0;

    while !planner.is_finished() {
        if tick >= max_ticks {
            return Err(Error::InvalidState(format!("crawl did not finish within {} s", sim.max_crawl_time)).at_tick(tick));
        }
        let t = tick as f64 * dt;
        let cmd = planner.update(&state.q, dt).map_err(|e| e.at_tick(tick))?;
        let on_ground = cmd.phase.is_leg_phase();
        let kin = forward_kinematics(model, &state.q);
        let alloc: Allocation = if on_ground {
            allocator.allocate_all_legs_lift(model, &kin, &Rotation3::identity())
        } else {
            allocator.allocate_torso_support(model, &kin, &Rotation3::identity())
        }
        .map_err(|e| e.at_tick(tick))?;

        let mut violations = 0;
        if on_ground {
            let report = check_torso_contact(model, &kin, &alloc.commands, &bounds);
            summary.max_contact_violation = summary.max_contact_violation.max(report.excess);
            violations += report.violated as usize;
        }
        let pd = joint_pd(&state.q, &state.q_dot, &cmd.q_des, &cfg.gains, model.joint_torque_limit);
        let tau = (alloc.joint_torques + pd).map(|v| v.clamp(-model.joint_torque_limit, model.joint_torque_limit));
        let e_r = if cmd.phase == GaitPhase::ResetTorsoTargets || on_ground { Vector3::zeros() } else { cmd.torso_target - state.position };
        records.push(TickRecord {
            t,
            position: state.position,
            euler: Vector3::zeros(),
            q: state.q,
            joint_torques: tau,
            commands: alloc.commands,
            e_r,
            e_rot: Vector3::zeros(),
            solve_time: alloc.solve_time,
            violations,
            wrench_residual: alloc.wrench_residual,
            joint_residual: alloc.joint_residual,
        });
        times.push(alloc.solve_time.as_secs_f64() * 1e3);
        summary.thrust_integral += alloc.total_thrust() * dt;
        summary.violations += violations;
        summary.norm_violations += alloc.norm_violations.len();
        summary.max_wrench_residual = summary.max_wrench_residual.max(alloc.wrench_residual);
        summary.max_joint_residual = summary.max_joint_residual.max(alloc.joint_residual);

        state = step_crawl(model, &state, &cmd.q_des, planner.footholds(), on_ground, sim);
        // The torso settles back on the ground at the end of the lowering phase.
        if planner.phase().is_leg_phase() && !on_ground {
            state.position.z = 0.0;
        }
        if planner.cycle() != last_cycle || (planner.is_finished() && cycle_start_joints.len() <= cfg.cycles) {
            last_cycle = planner.cycle();
            cycle_start_joints.push(state.q);
            cycle_start_torso.push(state.position);
        }
        if !state.q.iter().chain(state.position.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { tick, what: "crawl state" });
        }
        tick += 1;
    }

    summary.ticks = tick;
    summary.duration = tick as f64 * dt;
    let d = state.position - start_torso;
    summary.displacement = Some([d.x, d.y, d.z]);
    summary.cycle_displacements = cycle_start_torso.windows(2).map(|w| (w[1] - w[0]).dot(&cfg.gait.direction3())).collect();
    summary.cycle_start_joint_spread = Some(cycle_start_joints.iter().map(|q| (q - cycle_start_joints[0]).amax()).fold(0.0, f64::max));
    summary.hover_thrust_integral = model.total_mass() * model.gravity * summary.duration;
    summary.thrust_ratio = if summary.hover_thrust_integral > 0.0 { summary.thrust_integral / summary.hover_thrust_integral } else { 0.0 };
    summary.solve_ms_max = times.iter().copied().fold(0.0, f64::max);
    summary.solve_ms_median = median_ms(&mut times);
    let keyframes_json = serde_json::to_string_pretty(planner.keyframe_log()).ok();
    Ok(Trajectory { records, summary, cycle_start_joints, cycle_start_torso, keyframes_json })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::AllocationWeights;
    use crate::model::Wrench;
    use approx::assert_relative_eq;

    fn hover_commands(model: &RobotModel, kin: &KinematicsResult) -> [RotorCommand; N_ROTORS] {
        let mut a = Allocator::new(model, AllocationWeights::default());
        let w = Wrench { force: Vector3::new(0.0, 0.0, model.total_mass() * model.gravity), torque: Vector3::zeros(), frame: crate::model::Frame::CoG };
        a.allocate_flight(model, kin, &Rotation3::identity(), &w, &[]).unwrap().commands
    }

    fn quiet() -> SimConfig {
        SimConfig { disturbance_force: 0.0, disturbance_torque: 0.0, ..Default::default() }
    }

    #[test]
    fn hover_commands_hold_position() {
        let model = RobotModel::default();
        let mut state = RobotState::at_rest(JointVector::zeros());
        let kin = forward_kinematics(&model, &state.q);
        let cmds = hover_commands(&model, &kin);
        let start = state.position;
        for _ in 0..100 {
            state = step_flight(&model, &state, &kin, &cmds, &[1.0; 8], &state.q.clone(), &Vector6::zeros(), &quiet());
        }
        assert!((state.position - start).norm() < 1e-6);
    }

    #[test]
    fn zero_thrust_free_fall() {
        let model = RobotModel::default();
        let mut state = RobotState::at_rest(JointVector::zeros());
        let kin = forward_kinematics(&model, &state.q);
        let cmds = [RotorCommand::default(); N_ROTORS];
        for _ in 0..40 {
            state = step_flight(&model, &state, &kin, &cmds, &[1.0; 8], &state.q.clone(), &Vector6::zeros(), &quiet());
        }
        assert_relative_eq!(state.velocity.z, -9.8, epsilon = 1e-9);
    }

    #[test]
    fn constant_yaw_torque_spins_up_linearly() {
        let model = RobotModel::default();
        let mut state = RobotState::at_rest(JointVector::zeros());
        let kin = forward_kinematics(&model, &state.q);
        let cmds = hover_commands(&model, &kin);
        let tau = 2.0;
        let external = Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, tau);
        for _ in 0..40 {
            state = step_flight(&model, &state, &kin, &cmds, &[1.0; 8], &state.q.clone(), &external, &quiet());
        }
        assert_relative_eq!(state.angular_velocity.z, tau / kin.inertia[(2, 2)] * 1.0, epsilon = 1e-9);
    }

    #[test]
    fn servo_is_rate_limited_and_converges() {
        let q = JointVector::zeros();
        let target = JointVector::from_element(1.0);
        let (next, rate) = servo_step(&q, &target, 0.1, 0.2, 0.025);
        assert_relative_eq!(next[0], 0.005, epsilon = 1e-15);
        assert_relative_eq!(rate[0], 0.2, epsilon = 1e-12);
        let mut q = q;
        for _ in 0..2000 {
            q = servo_step(&q, &target, 0.1, 0.2, 0.025).0;
        }
        assert_relative_eq!(q, target, epsilon = 1e-12);
    }

    #[test]
    fn lifted_legs_without_thrust_violate_contact_bounds() {
        let model = RobotModel::default();
        let mut q = JointVector::zeros();
        // Legs 0 and 1 stretched out, legs 2 and 3 folded in: unbalanced.
        for leg in 2..4 {
            q[4 * leg + 1] = -1.5;
            q[4 * leg + 3] = 1.5;
        }
        let kin = forward_kinematics(&model, &q);
        let bounds = ContactWrenchBounds::for_model(&model);
        let report = check_torso_contact(&model, &kin, &[RotorCommand::default(); N_ROTORS], &bounds);
        assert!(report.violated);
        assert!(report.wrench[3].abs() > bounds.tau_xy || report.wrench[4].abs() > bounds.tau_xy);

        let mut a = Allocator::new(&model, AllocationWeights::default());
        let alloc = a.allocate_all_legs_lift(&model, &kin, &Rotation3::identity()).unwrap();
        let report = check_torso_contact(&model, &kin, &alloc.commands, &bounds);
        assert!(!report.violated, "{report:?}");
        let vertical: f64 = alloc.commands.iter().map(|c| c.force.z).sum();
        assert_relative_eq!(report.wrench[2], model.total_mass() * model.gravity - vertical, epsilon = 1e-6);
    }

    #[test]
    fn torso_fit_recovers_pinned_torso() {
        let model = RobotModel::default();
        let params = crate::gait::GaitParams::default();
        let torso = Vector3::new(0.3, -0.1, 0.05);
        let feet = crate::gait::default_footholds(&model, &params, &Vector3::new(0.3, -0.1, 0.0));
        let q = crate::gait::stance_joints(&model, &torso, &feet).unwrap();
        assert_relative_eq!(fit_torso(&model, &q, &feet), torso, epsilon = 1e-9);
    }

    #[test]
    fn flight_segments_lookup() {
        let s = FlightScenario::default();
        assert_eq!(s.segment_at(0.0), 0);
        assert_eq!(s.segment_at(8.0), 1);
        assert_eq!(s.segment_at(1e9), 2);
        assert!(FlightScenario { segments: vec![FormSegment { form: 4, duration: 1.0 }], ..Default::default() }.validate().is_err());
    }
}
