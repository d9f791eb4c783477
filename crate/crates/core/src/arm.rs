//! Rigid-body dynamics of a planar N-link revolute arm.
//!
//! The base joint sits at the origin and gravity acts along `-y`. Joint angles
//! are relative: the absolute angle of link `i` is `q_0 + ... + q_i`, measured
//! from the `+x` axis. Dynamics follow the Lagrangian manipulator equation
//!
//! ```text
//! M(q) q̈ + C(q, q̇) q̇ + g(q) = τ - D q̇ - K (q - q_rest)
//! ```
//!
//! with `C` assembled from Christoffel symbols, so `Ṁ - 2C` is skew-symmetric.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRAVITY: f64 = 9.81;
pub const DEFAULT_TORQUE_LIMIT: f64 = 50.0;
pub const DEFAULT_JOINT_LIMIT: f64 = 2.8;
pub const DEFAULT_FLOOR_HEIGHT: f64 = -0.05;
pub const DEFAULT_SELF_CLEARANCE: f64 = 0.01;

/// Physical description of one planar arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    /// Distance from the proximal joint to the link's center of mass, along the link.
    pub com_offsets: Vec<f64>,
    /// Rotational inertia about the link's center of mass.
    pub link_inertias: Vec<f64>,
    pub joint_damping: Vec<f64>,
    pub joint_stiffness: Vec<f64>,
    pub rest_positions: Vec<f64>,
    pub gravity: f64,
    pub torque_limits: Vec<f64>,
    /// Symmetric limit: joint `i` is valid on `(-limit_i, limit_i)`.
    pub joint_position_limits: Vec<f64>,
    /// Any joint or end-effector point below this height collides with the floor.
    pub floor_height: f64,
    /// Non-adjacent links closer than this are in self-collision.
    pub self_collision_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub t: f64,
}

impl ArmState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        ArmState {
            q,
            qdot: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qdot).all(|v| v.is_finite()) && self.t.is_finite()
    }
}

/// End-effector position and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Recorded output row: end-effector position, orientation as (cos, sin), joint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseOutput {
    pub ee_x: f64,
    pub ee_y: f64,
    pub ee_cos: f64,
    pub ee_sin: f64,
    pub q: Vec<f64>,
}

impl PoseOutput {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 + self.q.len());
        out.extend_from_slice(&[self.ee_x, self.ee_y, self.ee_cos, self.ee_sin]);
        out.extend_from_slice(&self.q);
        out
    }
}

/// Names of the output channels emitted for an arm with `n_links` joints.
pub fn output_channel_names(n_links: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "cos", "sin"].iter().map(|s| s.to_string()).collect();
    names.extend((0..n_links).map(|i| format!("q{i}")));
    names
}

pub fn output_dim(n_links: usize) -> usize {
    4 + n_links
}

/// Manipulator-equation terms at one state.
#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    TorqueSaturation,
    PositionLimit,
    FloorCollision,
    SelfCollision,
    OutputDiscontinuity,
    Diverged,
}

impl Violation {
    pub fn as_str(self) -> &'static str {
        match self {
            Violation::TorqueSaturation => "torque_saturation",
            Violation::PositionLimit => "position_limit",
            Violation::FloorCollision => "floor_collision",
            Violation::SelfCollision => "self_collision",
            Violation::OutputDiscontinuity => "output_discontinuity",
            Violation::Diverged => "diverged",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Set of constraint violations found at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ViolationSet {
    pub torque_saturation: bool,
    pub position_limit: bool,
    pub floor_collision: bool,
    pub self_collision: bool,
}

impl ViolationSet {
    pub fn is_empty(&self) -> bool {
        self.kinds().is_empty()
    }

    pub fn kinds(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.torque_saturation {
            out.push(Violation::TorqueSaturation);
        }
        if self.position_limit {
            out.push(Violation::PositionLimit);
        }
        if self.floor_collision {
            out.push(Violation::FloorCollision);
        }
        if self.self_collision {
            out.push(Violation::SelfCollision);
        }
        out
    }

    pub fn first(&self) -> Option<Violation> {
        self.kinds().first().copied()
    }
}

impl ArmModel {
    /// Uniform-rod links with the given lengths and masses, no joint friction or springs.
    pub fn uniform_rods(lengths: &[f64], masses: &[f64]) -> Self {
        let n = lengths.len();
        ArmModel {
            link_lengths: lengths.to_vec(),
            link_masses: masses.to_vec(),
            com_offsets: lengths.iter().map(|l| 0.5 * l).collect(),
            link_inertias: lengths
                .iter()
                .zip(masses)
                .map(|(l, m)| m * l * l / 12.0)
                .collect(),
            joint_damping: vec![0.0; n],
            joint_stiffness: vec![0.0; n],
            rest_positions: vec![0.0; n],
            gravity: DEFAULT_GRAVITY,
            torque_limits: vec![DEFAULT_TORQUE_LIMIT; n],
            joint_position_limits: vec![DEFAULT_JOINT_LIMIT; n],
            floor_height: DEFAULT_FLOOR_HEIGHT,
            self_collision_clearance: DEFAULT_SELF_CLEARANCE,
        }
    }

    /// Nominal arm used as the center of domain randomization.
    pub fn nominal(n_links: usize) -> Self {
        match n_links {
            3 => Self::uniform_rods(&[0.5, 0.4, 0.3], &[2.0, 1.5, 1.0]),
            n => {
                let lengths: Vec<f64> = (0..n).map(|i| 1.2 / n as f64 * (1.0 - 0.1 * i as f64).max(0.3)).collect();
                let masses: Vec<f64> = (0..n).map(|i| (2.0 - 0.5 * i as f64).max(0.5)).collect();
                Self::uniform_rods(&lengths, &masses)
            }
        }
    }

    pub fn n_links(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_links();
        if n == 0 {
            return Err(Error::Config("arm must have at least one link".into()));
        }
        let per_joint: [(&'static str, usize); 9] = [
            ("link_masses", self.link_masses.len()),
            ("com_offsets", self.com_offsets.len()),
            ("link_inertias", self.link_inertias.len()),
            ("joint_damping", self.joint_damping.len()),
            ("joint_stiffness", self.joint_stiffness.len()),
            ("rest_positions", self.rest_positions.len()),
            ("torque_limits", self.torque_limits.len()),
            ("joint_position_limits", self.joint_position_limits.len()),
            ("link_lengths", n),
        ];
        for (what, len) in per_joint {
            if len != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        for i in 0..n {
            if !(self.link_lengths[i] > 0.0 && self.link_masses[i] > 0.0 && self.link_inertias[i] > 0.0) {
                return Err(Error::Config(format!(
                    "link {i}: length, mass and inertia must be strictly positive"
                )));
            }
            if !(0.0..=self.link_lengths[i]).contains(&self.com_offsets[i]) {
                return Err(Error::Config(format!(
                    "link {i}: center-of-mass offset {} outside [0, {}]",
                    self.com_offsets[i], self.link_lengths[i]
                )));
            }
            if self.torque_limits[i] < 0.0 || self.joint_position_limits[i] <= 0.0 {
                return Err(Error::Config(format!("joint {i}: limits must be positive")));
            }
            if self.joint_damping[i] < 0.0 || self.joint_stiffness[i] < 0.0 {
                return Err(Error::Config(format!(
                    "joint {i}: damping and stiffness must be non-negative"
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, what: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.n_links() {
            return Err(Error::Dimension {
                what,
                expected: self.n_links(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// Cumulative (absolute) link angles.
    fn absolute_angles(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .scan(0.0, |acc, qi| {
                *acc += qi;
                Some(*acc)
            })
            .collect()
    }

    /// Joint positions `p_0 = base, p_1, ..., p_n = end effector`.
    pub fn joint_points(&self, q: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.check_len("q", q)?;
        let theta = self.absolute_angles(q);
        let mut pts = Vec::with_capacity(q.len() + 1);
        let (mut x, mut y) = (0.0, 0.0);
        pts.push((x, y));
        for (l, th) in self.link_lengths.iter().zip(&theta) {
            x += l * th.cos();
            y += l * th.sin();
            pts.push((x, y));
        }
        Ok(pts)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<EePose> {
        let pts = self.joint_points(q)?;
        let (x, y) = pts[pts.len() - 1];
        Ok(EePose {
            x,
            y,
            theta: q.iter().sum(),
        })
    }

    /// 3×n Jacobian of `[x, y, θ]` with respect to `q`.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len("q", q)?;
        let n = self.n_links();
        let theta = self.absolute_angles(q);
        let mut jac = DMatrix::zeros(3, n);
        for j in 0..n {
            let (mut dx, mut dy) = (0.0, 0.0);
            for l in j..n {
                dx -= self.link_lengths[l] * theta[l].sin();
                dy += self.link_lengths[l] * theta[l].cos();
            }
            jac[(0, j)] = dx;
            jac[(1, j)] = dy;
            jac[(2, j)] = 1.0;
        }
        Ok(jac)
    }

    /// Lever arm of segment `l` when measuring the center of mass of link `i` (`l <= i`).
    fn lever(&self, l: usize, i: usize) -> f64 {
        if l == i {
            self.com_offsets[i]
        } else {
            self.link_lengths[l]
        }
    }

    /// Linear-velocity Jacobian (2×n) of the center of mass of link `i`.
    fn com_jacobian(&self, theta: &[f64], i: usize) -> DMatrix<f64> {
        let n = self.n_links();
        let mut jac = DMatrix::zeros(2, n);
        for j in 0..=i {
            for l in j..=i {
                let r = self.lever(l, i);
                jac[(0, j)] -= r * theta[l].sin();
                jac[(1, j)] += r * theta[l].cos();
            }
        }
        jac
    }

    /// `∂J_i/∂q_k` for the center-of-mass Jacobian of link `i`.
    fn com_jacobian_derivative(&self, theta: &[f64], i: usize, k: usize) -> DMatrix<f64> {
        let n = self.n_links();
        let mut djac = DMatrix::zeros(2, n);
        if k > i {
            return djac;
        }
        for j in 0..=i {
            for l in j.max(k)..=i {
                let r = self.lever(l, i);
                djac[(0, j)] -= r * theta[l].cos();
                djac[(1, j)] -= r * theta[l].sin();
            }
        }
        djac
    }

    /// Joint-space inertia matrix `M(q)`.
    pub fn mass_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len("q", q)?;
        let n = self.n_links();
        let theta = self.absolute_angles(q);
        let mut mass = DMatrix::zeros(n, n);
        for i in 0..n {
            let jv = self.com_jacobian(&theta, i);
            mass += (jv.transpose() * &jv) * self.link_masses[i];
            // Angular velocity of link i is the sum of joint rates 0..=i.
            for a in 0..=i {
                for b in 0..=i {
                    mass[(a, b)] += self.link_inertias[i];
                }
            }
        }
        Ok(mass)
    }

    /// `∂M/∂q_k` for every `k`.
    fn mass_matrix_partials(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.n_links();
        let jacs: Vec<DMatrix<f64>> = (0..n).map(|i| self.com_jacobian(theta, i)).collect();
        (0..n)
            .map(|k| {
                let mut dm = DMatrix::zeros(n, n);
                for (i, jv) in jacs.iter().enumerate().skip(k) {
                    let djv = self.com_jacobian_derivative(theta, i, k);
                    let prod = djv.transpose() * jv;
                    dm += (&prod + prod.transpose()) * self.link_masses[i];
                }
                dm
            })
            .collect()
    }

    /// Gravity torques `g(q) = ∂V/∂q`.
    pub fn gravity_torques(&self, q: &[f64]) -> Result<DVector<f64>> {
        self.check_len("q", q)?;
        let n = self.n_links();
        let theta = self.absolute_angles(q);
        let mut g = DVector::zeros(n);
        for j in 0..n {
            for i in j..n {
                let dy: f64 = (j..=i).map(|l| self.lever(l, i) * theta[l].cos()).sum();
                g[j] += self.link_masses[i] * self.gravity * dy;
            }
        }
        Ok(g)
    }

    pub fn dynamics_terms(&self, state: &ArmState) -> Result<DynamicsTerms> {
        self.check_len("q", &state.q)?;
        self.check_len("qdot", &state.qdot)?;
        let n = self.n_links();
        let theta = self.absolute_angles(&state.q);
        let mass = self.mass_matrix(&state.q)?;
        let dm = self.mass_matrix_partials(&theta);
        let mut coriolis = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut c = 0.0;
                for k in 0..n {
                    let christoffel = 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]);
                    c += christoffel * state.qdot[k];
                }
                coriolis[(i, j)] = c;
            }
        }
        let gravity = self.gravity_torques(&state.q)?;
        Ok(DynamicsTerms {
            mass,
            coriolis,
            gravity,
        })
    }

    /// Joint torques from friction and springs, `D q̇ + K (q - q_rest)`.
    fn passive_torques(&self, state: &ArmState) -> DVector<f64> {
        DVector::from_iterator(
            self.n_links(),
            (0..self.n_links()).map(|i| {
                self.joint_damping[i] * state.qdot[i]
                    + self.joint_stiffness[i] * (state.q[i] - self.rest_positions[i])
            }),
        )
    }

    pub fn forward_dynamics(&self, state: &ArmState, tau: &[f64]) -> Result<DVector<f64>> {
        self.check_len("tau", tau)?;
        let terms = self.dynamics_terms(state)?;
        let qdot = DVector::from_column_slice(&state.qdot);
        let rhs = DVector::from_column_slice(tau)
            - &terms.coriolis * &qdot
            - &terms.gravity
            - self.passive_torques(state);
        let chol = terms.mass.cholesky().ok_or(Error::SingularInertia)?;
        Ok(chol.solve(&rhs))
    }

    /// One semi-implicit Euler step.
    pub fn step(&self, state: &ArmState, tau: &[f64], dt: f64) -> Result<ArmState> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let qddot = self.forward_dynamics(state, tau)?;
        let qdot: Vec<f64> = state
            .qdot
            .iter()
            .zip(qddot.iter())
            .map(|(v, a)| v + dt * a)
            .collect();
        let q: Vec<f64> = state.q.iter().zip(&qdot).map(|(p, v)| p + dt * v).collect();
        let next = ArmState {
            q,
            qdot,
            t: state.t + dt,
        };
        if !next.is_finite() {
            return Err(Error::Diverged { t: next.t });
        }
        Ok(next)
    }

    /// Kinetic plus gravitational plus spring potential energy.
    pub fn total_energy(&self, state: &ArmState) -> Result<f64> {
        let mass = self.mass_matrix(&state.q)?;
        let qdot = DVector::from_column_slice(&state.qdot);
        let kinetic = 0.5 * qdot.dot(&(&mass * &qdot));
        let theta = self.absolute_angles(&state.q);
        let mut potential = 0.0;
        for i in 0..self.n_links() {
            let y: f64 = (0..=i).map(|l| self.lever(l, i) * theta[l].sin()).sum();
            potential += self.link_masses[i] * self.gravity * y;
            potential += 0.5
                * self.joint_stiffness[i]
                * (state.q[i] - self.rest_positions[i]).powi(2);
        }
        Ok(kinetic + potential)
    }

    pub fn pose_output(&self, q: &[f64]) -> Result<PoseOutput> {
        let ee = self.forward_kinematics(q)?;
        Ok(PoseOutput {
            ee_x: ee.x,
            ee_y: ee.y,
            ee_cos: ee.theta.cos(),
            ee_sin: ee.theta.sin(),
            q: q.to_vec(),
        })
    }

    pub fn check_violations(&self, state: &ArmState, tau: &[f64]) -> Result<ViolationSet> {
        self.check_len("tau", tau)?;
        let mut set = ViolationSet {
            torque_saturation: tau
                .iter()
                .zip(&self.torque_limits)
                .any(|(t, lim)| t.abs() >= *lim),
            position_limit: state
                .q
                .iter()
                .zip(&self.joint_position_limits)
                .any(|(q, lim)| q.abs() >= *lim),
            ..Default::default()
        };
        let pts = self.joint_points(&state.q)?;
        set.floor_collision = pts.iter().skip(1).any(|&(_, y)| y < self.floor_height);
        let n = self.n_links();
        'outer: for a in 0..n {
            for b in (a + 2)..n {
                let d = segment_distance(pts[a], pts[a + 1], pts[b], pts[b + 1]);
                if d < self.self_collision_clearance {
                    set.self_collision = true;
                    break 'outer;
                }
            }
        }
        Ok(set)
    }
}

type Point = (f64, f64);

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Minimum distance between segments `p1p2` and `p3p4`; zero when they intersect.
pub fn segment_distance(p1: Point, p2: Point, p3: Point, p4: Point) -> f64 {
    let d1 = cross(p3, p4, p1);
    let d2 = cross(p3, p4, p2);
    let d3 = cross(p1, p2, p3);
    let d4 = cross(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return 0.0;
    }
    point_segment_distance(p1, p3, p4)
        .min(point_segment_distance(p2, p3, p4))
        .min(point_segment_distance(p3, p1, p2))
        .min(point_segment_distance(p4, p1, p2))
}
