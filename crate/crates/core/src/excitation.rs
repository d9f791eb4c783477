//! Torque excitation signals and operational-space control.
//!
//! Two open-loop families (a four-term harmonic ladder and a frequency-modulated
//! cosine) and one closed-loop family (task-space PD with dynamics feedforward
//! tracking a circle or a spiral).

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, ArmState};
use crate::error::{Error, Result};

/// Frequency ratios of the four harmonic terms relative to the base frequency.
pub const HARMONIC_LADDER: [f64; 4] = [1.0, 1.5, 2.0, 3.0];

/// Amplitude bound per unit of main frequency: `|A_k| <= 15 f_m`.
pub const MULTISIN_AMPLITUDE_PER_HZ: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSinJoint {
    pub amplitudes: [f64; 4],
    pub base_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSinConfig {
    /// Main frequency parameter `f_m` (Hz).
    pub main_frequency: f64,
    pub joints: Vec<MultiSinJoint>,
}

impl MultiSinConfig {
    pub fn amplitude_bound(&self) -> f64 {
        self.main_frequency * MULTISIN_AMPLITUDE_PER_HZ
    }

    pub fn sample<R: Rng + ?Sized>(main_frequency: f64, n_joints: usize, rng: &mut R) -> Self {
        let bound = main_frequency * MULTISIN_AMPLITUDE_PER_HZ;
        let joints = (0..n_joints)
            .map(|_| {
                let base_frequency = rng.gen_range(main_frequency / 1.5..=1.5 * main_frequency);
                let mut amplitudes = [0.0; 4];
                for a in &mut amplitudes {
                    *a = rng.gen_range(-bound..=bound);
                }
                MultiSinJoint {
                    amplitudes,
                    base_frequency,
                }
            })
            .collect();
        MultiSinConfig {
            main_frequency,
            joints,
        }
    }

    pub fn torque(&self, joint: usize, t: f64) -> f64 {
        let j = &self.joints[joint];
        let w0 = TAU * j.base_frequency;
        let w: [f64; 4] = HARMONIC_LADDER.map(|r| r * w0);
        j.amplitudes[0] * (w[0] * t).cos()
            + j.amplitudes[1] * (w[1] * t).sin()
            + j.amplitudes[2] * (w[2] * t).cos()
            + j.amplitudes[3] * (w[3] * t).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpJoint {
    pub amplitude: f64,
    pub phase: f64,
    pub carrier_frequency: f64,
    pub modulation_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChirpConfig {
    pub main_frequency: f64,
    pub joints: Vec<ChirpJoint>,
}

pub const CHIRP_AMPLITUDE_BOUND: f64 = 4.0;

impl ChirpConfig {
    pub fn sample<R: Rng + ?Sized>(main_frequency: f64, n_joints: usize, rng: &mut R) -> Self {
        let joints = (0..n_joints)
            .map(|_| ChirpJoint {
                amplitude: rng.gen_range(-CHIRP_AMPLITUDE_BOUND..=CHIRP_AMPLITUDE_BOUND),
                phase: rng.gen_range(-PI..=PI),
                carrier_frequency: rng.gen_range(main_frequency..=1.5 * main_frequency),
                modulation_frequency: rng.gen_range(main_frequency / 1.5..=2.0 * main_frequency),
            })
            .collect();
        ChirpConfig {
            main_frequency,
            joints,
        }
    }

    pub fn torque(&self, joint: usize, t: f64) -> f64 {
        let j = &self.joints[joint];
        let w1 = TAU * j.carrier_frequency;
        let w2 = TAU * j.modulation_frequency;
        j.amplitude * (w1 * (1.0 + 0.25 * (w2 * t).cos()) * t + j.phase).cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OscTask {
    Circle,
    Spiral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpiralDirection {
    Up,
    Down,
}

impl SpiralDirection {
    fn sign(self) -> f64 {
        match self {
            SpiralDirection::Up => 1.0,
            SpiralDirection::Down => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscConfig {
    /// Position gains per task axis (N/m).
    pub kp: [f64; 2],
    /// Velocity gains per task axis (N·s/m).
    pub kd: [f64; 2],
    pub task: OscTask,
    /// Initial radius (m).
    pub radius: f64,
    /// Angular rate of the reference, in Hz. Negative values run clockwise.
    pub frequency: f64,
    pub center: [f64; 2],
    pub direction: SpiralDirection,
    /// Radial growth speed of the spiral (m/s), applied with the direction's sign.
    pub spiral_rate: f64,
    /// Damping added before inverting the task-space inertia.
    pub lambda: f64,
}

impl Default for OscConfig {
    fn default() -> Self {
        OscConfig {
            kp: [400.0, 400.0],
            kd: [40.0, 40.0],
            task: OscTask::Circle,
            radius: 0.1,
            frequency: 0.1,
            center: [0.0, 0.0],
            direction: SpiralDirection::Up,
            spiral_rate: 0.0,
            lambda: 1e-4,
        }
    }
}

impl OscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kp.iter().chain(&self.kd).any(|g| *g < 0.0 || !g.is_finite()) {
            return Err(Error::Config("OSC gains must be non-negative".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("OSC radius must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("OSC damping must be non-negative".into()));
        }
        Ok(())
    }

    /// Place the reference so that it starts at `start`.
    pub fn anchored_at(mut self, start: [f64; 2]) -> Self {
        self.center = [start[0] - self.radius, start[1]];
        self
    }
}

/// Desired task-space position, velocity and acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub acc: [f64; 2],
}

pub fn reference_trajectory(cfg: &OscConfig, t: f64) -> Reference {
    let w = TAU * cfg.frequency;
    let (s, c) = (w * t).sin_cos();
    let (r, rdot) = match cfg.task {
        OscTask::Circle => (cfg.radius, 0.0),
        OscTask::Spiral => {
            let rate = cfg.direction.sign() * cfg.spiral_rate;
            (cfg.radius + rate * t, rate)
        }
    };
    Reference {
        pos: [cfg.center[0] + r * c, cfg.center[1] + r * s],
        vel: [rdot * c - r * w * s, rdot * s + r * w * c],
        acc: [
            -2.0 * rdot * w * s - r * w * w * c,
            2.0 * rdot * w * c - r * w * w * s,
        ],
    }
}

/// Operational-space torque `g + Jᵀ (Λ ẍᵈ + Kp (xᵈ - x) + Kd (ẋᵈ - ẋ))`, clamped to the torque limits.
///
/// The task-space Coriolis feedforward is omitted (`C_ee = 0`) and the task inertia
/// `Λ = (J M⁻¹ Jᵀ + λI)⁻¹` is damped so it stays finite at singular poses.
pub fn osc_torque(model: &ArmModel, state: &ArmState, cfg: &OscConfig, t: f64) -> Result<Vec<f64>> {
    let n = model.n_links();
    if n < 2 {
        return Err(Error::Config(format!(
            "operational-space control needs at least 2 links, got {n}"
        )));
    }
    let ee = model.forward_kinematics(&state.q)?;
    let jac = model.jacobian(&state.q)?;
    let jp: DMatrix<f64> = jac.rows(0, 2).into_owned();
    let qdot = DVector::from_column_slice(&state.qdot);
    let xdot = &jp * &qdot;

    let mass = model.mass_matrix(&state.q)?;
    let chol = mass.cholesky().ok_or(Error::SingularInertia)?;
    let minv_jt = chol.solve(&jp.transpose());
    let inv_lambda = &jp * minv_jt;
    let inv_lambda = Matrix2::new(
        inv_lambda[(0, 0)] + cfg.lambda,
        inv_lambda[(0, 1)],
        inv_lambda[(1, 0)],
        inv_lambda[(1, 1)] + cfg.lambda,
    );
    let task_inertia = inv_lambda.try_inverse().ok_or(Error::SingularInertia)?;

    let r = reference_trajectory(cfg, t);
    let pos_err = Vector2::new(r.pos[0] - ee.x, r.pos[1] - ee.y);
    let vel_err = Vector2::new(r.vel[0] - xdot[0], r.vel[1] - xdot[1]);
    let force = task_inertia * Vector2::new(r.acc[0], r.acc[1])
        + Vector2::new(cfg.kp[0] * pos_err[0], cfg.kp[1] * pos_err[1])
        + Vector2::new(cfg.kd[0] * vel_err[0], cfg.kd[1] * vel_err[1]);

    let g = model.gravity_torques(&state.q)?;
    let force = DVector::from_column_slice(force.as_slice());
    let tau = g + jp.transpose() * force;
    Ok(tau
        .iter()
        .zip(&model.torque_limits)
        .map(|(t, lim)| t.clamp(-lim, *lim))
        .collect())
}
