//! Downwash-free vectoring ranges.
//!
//! With the roll angle φ of a rotor held at the value that points it straight
//! up, the remaining tilt θ sweeps the downwash ray through a vertical plane.
//! For every other rotor close to that plane the tilts whose downwash passes
//! within a clearance radius are removed; what remains is a union of
//! disjoint θ-intervals, of which the one closest to θ = 0 is kept. Rotors
//! whose kept interval ends close to θ = 0 get three linear constraints on
//! their force so the allocation QP stays convex.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rot_x, rot_y, rot_z, KinematicsResult, N_ROTORS};

/// Geometry of the downwash: a straight ray opposite to the thrust.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownwashModel {
    /// Radius of the clearance cylinder around the downwash axis [m].
    pub clearance_radius: f64,
    /// Downstream distance beyond which obstacles are ignored [m].
    pub influence_length: f64,
}

impl Default for DownwashModel {
    fn default() -> Self {
        Self { clearance_radius: 0.144, influence_length: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterferenceParams {
    pub downwash: DownwashModel,
    /// Pairs inclined by at least this angle are ignored [rad].
    pub alpha_threshold: f64,
    /// Rotors whose chosen bound is closer than this to θ = 0 are restricted [rad].
    pub theta_threshold: f64,
    /// Mechanical tilt range `[-theta_max, theta_max]` [rad].
    pub theta_max: f64,
    /// Sampling step of the blocked-tilt search [rad].
    pub grid_step: f64,
    /// Bisection tolerance on interval edges [rad].
    pub edge_tolerance: f64,
    /// Also treat link rods as obstacles (off by default: only rotor pairs interfere).
    pub include_links: bool,
}

impl Default for InterferenceParams {
    fn default() -> Self {
        Self {
            downwash: DownwashModel::default(),
            alpha_threshold: 30f64.to_radians(),
            theta_threshold: 0.7,
            theta_max: 1.2,
            grid_step: 1f64.to_radians(),
            edge_tolerance: 0.01f64.to_radians(),
            include_links: false,
        }
    }
}

impl InterferenceParams {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(field, format!("must be positive, got {v}")))
            }
        };
        check("clearance_radius", self.downwash.clearance_radius)?;
        check("influence_length", self.downwash.influence_length)?;
        check("alpha_threshold", self.alpha_threshold)?;
        check("theta_max", self.theta_max)?;
        check("grid_step", self.grid_step)?;
        check("edge_tolerance", self.edge_tolerance)?;
        if !(self.theta_threshold >= 0.0) {
            return Err(Error::invalid("theta_threshold", "must be non-negative"));
        }
        if self.theta_max >= PI / 2.0 + 1e-12 {
            return Err(Error::invalid("theta_max", "must be below π/2"));
        }
        Ok(())
    }
}

/// Closed tilt interval `[lo, hi]` [rad].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ThetaInterval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        Self { lo, hi }
    }

    pub fn contains(&self, theta: f64) -> bool {
        self.lo <= theta && theta <= self.hi
    }

    pub fn measure(&self) -> f64 {
        self.hi - self.lo
    }

    /// Smallest |θ| over the interval.
    pub fn distance_to_zero(&self) -> f64 {
        if self.contains(0.0) {
            0.0
        } else {
            self.lo.abs().min(self.hi.abs())
        }
    }
}

/// Nominal vectoring angles that point a rotor straight up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalAngles {
    pub phi: f64,
    pub theta: f64,
    /// The link rod is vertical; `phi` is the locked value supplied by the caller.
    pub singular: bool,
}

/// Solve `R_link u(φ̂, θ̂) = ẑ`. When the rod is vertical φ̂ is undetermined
/// and `locked_phi` is used instead.
pub fn nominal_angles(r_link: &Matrix3<f64>, locked_phi: f64) -> NominalAngles {
    let c = r_link.transpose() * Vector3::z();
    let singular = c.y.hypot(c.z) < 1e-6;
    let mut phi = if singular { locked_phi } else { (-c.y).atan2(c.z) };
    // Keep φ̂ in (−π, π]; a rod past vertical would otherwise flip sign with the sign of a zero.
    if phi <= -PI + 1e-12 {
        phi += 2.0 * PI;
    }
    let (sp, cp) = phi.sin_cos();
    let theta = c.x.atan2(-c.y * sp + c.z * cp);
    NominalAngles { phi, theta, singular }
}

/// Orientation of the φ-aligned link frame: tilting by θ rotates the thrust
/// about its y-axis, `u(φ, θ) = F · [sin θ, 0, cos θ]`.
pub fn aligned_frame(r_link: &Matrix3<f64>, phi: f64) -> Matrix3<f64> {
    r_link * rot_x(phi)
}

/// Inclination of the pair (i, j) about the first vectoring axis.
///
/// `frame` is rotor i's φ-aligned link frame; `α = atan(|v_y| / |v_z|)` with
/// `v = p_j - p_i` in that frame.
pub fn pair_inclination(p_i: &Vector3<f64>, p_j: &Vector3<f64>, frame: &Matrix3<f64>) -> Result<f64> {
    let v = frame.transpose() * (p_j - p_i);
    if v.norm() < 1e-12 {
        return Err(Error::CoincidentRotors(0, 0));
    }
    Ok(v.y.abs().atan2(v.z.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Obstacle {
    /// Rotor disc center.
    Point(Vector3<f64>),
    /// Link rod between two points.
    Segment(Vector3<f64>, Vector3<f64>),
}

/// Pose of the rotor whose downwash is examined.
#[derive(Debug, Clone, Copy)]
pub struct RotorPose {
    pub position: Vector3<f64>,
    /// φ-aligned link frame.
    pub frame: Matrix3<f64>,
}

impl RotorPose {
    /// Unit vector along the downwash for tilt θ.
    pub fn downwash_direction(&self, theta: f64) -> Vector3<f64> {
        -(self.frame * Vector3::new(theta.sin(), 0.0, theta.cos()))
    }
}

/// Closest points between segments `p + s d` (s ∈ [0,1]) and `q + t e` (t ∈ [0,1]).
fn segment_params(p: &Vector3<f64>, d: &Vector3<f64>, q: &Vector3<f64>, e: &Vector3<f64>) -> (f64, f64) {
    let r = p - q;
    let a = d.dot(d);
    let c = e.dot(e);
    let b = d.dot(e);
    let f = e.dot(&r);
    let g = d.dot(&r);
    let denom = a * c - b * b;
    let mut s = if denom > 1e-14 { ((b * f - c * g) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = if c > 1e-14 { (b * s + f) / c } else { 0.0 };
    if t < 0.0 {
        t = 0.0;
        s = if a > 1e-14 { (-g / a).clamp(0.0, 1.0) } else { 0.0 };
    } else if t > 1.0 {
        t = 1.0;
        s = if a > 1e-14 { ((b - g) / a).clamp(0.0, 1.0) } else { 0.0 };
    }
    (s, t)
}

/// Does the downwash of `rotor` tilted to θ pass within the clearance radius of `obstacle`?
pub fn downwash_blocked(rotor: &RotorPose, obstacle: &Obstacle, theta: f64, downwash: &DownwashModel) -> bool {
    let w = rotor.downwash_direction(theta);
    let len = downwash.influence_length;
    let (closest, along) = match obstacle {
        Obstacle::Point(o) => {
            let t = (o - rotor.position).dot(&w);
            let t_clamped = t.clamp(0.0, len);
            (rotor.position + w * t_clamped, t)
        }
        Obstacle::Segment(a, b) => {
            let d = w * len;
            let (s, t) = segment_params(&rotor.position, &d, a, &(b - a));
            let on_obstacle = a + (b - a) * t;
            let on_ray = rotor.position + d * s;
            return s > 0.0 && (on_obstacle - on_ray).norm() < downwash.clearance_radius;
        }
    };
    let Obstacle::Point(o) = obstacle else { unreachable!() };
    // Only obstacles downstream of the rotor plane are affected.
    along > 0.0 && (o - closest).norm() < downwash.clearance_radius
}

/// Interval of tilts whose downwash hits `obstacle`, found on a regular grid
/// and refined by bisection. Interval ends lie on the clear side.
pub fn invalid_theta_interval(rotor: &RotorPose, obstacle: &Obstacle, params: &InterferenceParams) -> Option<ThetaInterval> {
    let tmax = params.theta_max;
    let steps = ((2.0 * tmax) / params.grid_step).ceil().max(1.0) as usize;
    let h = 2.0 * tmax / steps as f64;
    let theta_at = |k: usize| -tmax + h * k as f64;
    let blocked = |theta: f64| downwash_blocked(rotor, obstacle, theta, &params.downwash);

    let flags: Vec<bool> = (0..=steps).map(|k| blocked(theta_at(k))).collect();
    let first = flags.iter().position(|&b| b)?;
    let last = flags.iter().rposition(|&b| b)?;

    let refine = |mut clear: f64, mut hit: f64| {
        while (clear - hit).abs() > params.edge_tolerance {
            let mid = 0.5 * (clear + hit);
            if blocked(mid) {
                hit = mid;
            } else {
                clear = mid;
            }
        }
        clear
    };
    let lo = if first == 0 { -tmax } else { refine(theta_at(first - 1), theta_at(first)) };
    let hi = if last == steps { tmax } else { refine(theta_at(last + 1), theta_at(last)) };
    Some(ThetaInterval::new(lo, hi))
}

/// `[lo, hi]` minus the union of `invalid`, as sorted disjoint intervals.
pub fn subtract_intervals(full: ThetaInterval, invalid: &[ThetaInterval]) -> Vec<ThetaInterval> {
    let mut cuts: Vec<ThetaInterval> = invalid.to_vec();
    cuts.sort_by(|a, b| a.lo.total_cmp(&b.lo));
    let mut out = Vec::new();
    let mut cursor = full.lo;
    for cut in cuts {
        if cut.hi < cursor {
            continue;
        }
        if cut.lo > full.hi {
            break;
        }
        if cut.lo > cursor {
            out.push(ThetaInterval::new(cursor, cut.lo));
        }
        cursor = cursor.max(cut.hi);
    }
    if cursor < full.hi {
        out.push(ThetaInterval::new(cursor, full.hi));
    }
    out.retain(|s| s.measure() > 1e-9);
    out
}

/// Index of the subset whose closest point to θ = 0 is nearest; ties go to
/// the wider subset, then the lower index.
pub fn best_subset(subsets: &[ThetaInterval]) -> Option<usize> {
    const TIE: f64 = 1e-12;
    let mut best: Option<usize> = None;
    for (k, s) in subsets.iter().enumerate() {
        best = match best {
            None => Some(k),
            Some(b) => {
                let (sb, sk) = (subsets[b].distance_to_zero(), s.distance_to_zero());
                if sk < sb - TIE || ((sk - sb).abs() <= TIE && s.measure() > subsets[b].measure() + TIE) {
                    Some(k)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Whether a rotor with chosen bounds `[lo, hi]` must be constrained.
pub fn is_restricted(chosen: &ThetaInterval, theta_threshold: f64) -> bool {
    (-chosen.lo).min(chosen.hi) < theta_threshold
}

/// Indices of the restricted rotors.
pub fn restricted_set(ranges: &[VectoringRange], theta_threshold: f64) -> Vec<usize> {
    ranges.iter().filter(|r| is_restricted(&r.chosen, theta_threshold)).map(|r| r.rotor).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairInclination {
    pub other: usize,
    pub alpha: f64,
    pub ignored: bool,
}

/// Valid tilt range of one rotor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectoringRange {
    pub rotor: usize,
    pub nominal_phi: f64,
    pub nominal_theta: f64,
    pub singular: bool,
    /// φ-aligned link frame w.r.t. `{CoG}`.
    #[serde(skip)]
    pub frame: Matrix3<f64>,
    pub invalid: Vec<ThetaInterval>,
    /// Disjoint valid subsets, sorted.
    pub subsets: Vec<ThetaInterval>,
    pub chosen: ThetaInterval,
    pub restricted: bool,
    pub pairs: Vec<PairInclination>,
}

impl VectoringRange {
    /// Is the tilt θ inside one of the invalid intervals (strictly)?
    pub fn in_invalid(&self, theta: f64) -> bool {
        self.invalid.iter().any(|iv| theta > iv.lo && theta < iv.hi)
    }
}

/// Valid vectoring ranges of all rotors for the current joint configuration.
///
/// `locked_phi` supplies φ̂ for rotors whose rod is vertical, usually the
/// previous tick's value.
pub fn valid_range(kin: &KinematicsResult, params: &InterferenceParams, locked_phi: &[f64; N_ROTORS]) -> Result<Vec<VectoringRange>> {
    let full = ThetaInterval::new(-params.theta_max, params.theta_max);
    let mut out = Vec::with_capacity(N_ROTORS);
    for i in 0..N_ROTORS {
        let nominal = nominal_angles(&kin.link_rotations[i], locked_phi[i]);
        let frame = aligned_frame(&kin.link_rotations[i], nominal.phi);
        let pose = RotorPose { position: kin.rotors_base[i], frame };
        let mut invalid = Vec::new();
        let mut pairs = Vec::new();
        for j in (0..N_ROTORS).filter(|&j| j != i) {
            let alpha = pair_inclination(&kin.rotors_base[i], &kin.rotors_base[j], &frame)
                .map_err(|_| Error::CoincidentRotors(i, j))?;
            let ignored = alpha >= params.alpha_threshold;
            pairs.push(PairInclination { other: j, alpha, ignored });
            if ignored {
                continue;
            }
            if let Some(iv) = invalid_theta_interval(&pose, &Obstacle::Point(kin.rotors_base[j]), params) {
                invalid.push(iv);
            }
        }
        if params.include_links {
            for link in (0..N_ROTORS).filter(|&l| l != i) {
                if let Some(iv) = invalid_theta_interval(&pose, &link_segment(kin, link), params) {
                    invalid.push(iv);
                }
            }
        }
        let subsets = subtract_intervals(full, &invalid);
        let best = best_subset(&subsets).ok_or(Error::NoValidRange { rotor: i })?;
        let chosen = subsets[best];
        out.push(VectoringRange {
            rotor: i,
            nominal_phi: nominal.phi,
            nominal_theta: nominal.theta,
            singular: nominal.singular,
            frame,
            restricted: is_restricted(&chosen, params.theta_threshold),
            invalid,
            subsets,
            chosen,
            pairs,
        });
    }
    Ok(out)
}

fn link_segment(kin: &KinematicsResult, link: usize) -> Obstacle {
    // Proximal yaw joint of the link to the next link's yaw joint (or the foot).
    let start = kin.joint_positions[2 * link];
    let end = if link % 2 == 1 { kin.feet_base[link / 2] } else { kin.joint_positions[2 * link + 2] };
    Obstacle::Segment(start, end)
}

/// Frame aligned with a tilt bound: z along the bound direction, x pointing
/// toward decreasing θ. Expressed in the φ-aligned link frame.
pub fn bound_rotation(mu: f64) -> Matrix3<f64> {
    rot_z(PI) * rot_y(-mu)
}

/// Linear force constraints of one restricted rotor, as row vectors acting
/// on the rotor force expressed in `{CoG}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceConstraints {
    pub rotor: usize,
    /// `y_row · f = 0`: no force out of the tilt plane.
    pub y_row: Vector3<f64>,
    /// `inf_row · f ≤ 0`: θ ≥ lower bound.
    pub inf_row: Vector3<f64>,
    /// `sup_row · f ≥ 0`: θ ≤ upper bound.
    pub sup_row: Vector3<f64>,
}

impl ForceConstraints {
    pub fn satisfied(&self, f: &Vector3<f64>, tol: f64) -> bool {
        self.y_row.dot(f).abs() <= tol && self.inf_row.dot(f) <= tol && self.sup_row.dot(f) >= -tol
    }
}

pub fn force_constraints(range: &VectoringRange) -> ForceConstraints {
    let f = &range.frame;
    let inf = f * bound_rotation(range.chosen.lo).transpose();
    let sup = f * bound_rotation(range.chosen.hi).transpose();
    ForceConstraints {
        rotor: range.rotor,
        y_row: f.column(1).into_owned(),
        inf_row: inf.column(0).into_owned(),
        sup_row: sup.column(0).into_owned(),
    }
}

/// Tilt of a force inside the tilt plane of the φ-aligned frame.
pub fn tilt_in_frame(frame: &Matrix3<f64>, force: &Vector3<f64>) -> f64 {
    let g = frame.transpose() * force;
    g.x.atan2(g.z)
}
