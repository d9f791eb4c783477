use rand::Rng;

use crate::arm::{ArmModel, ArmState, Violation};
use crate::excitation::{osc_torque, ChirpConfig, MultiSinConfig, OscConfig, OscTask, SpiralDirection};

use super::{BlacklistEntry, GenerationJob, RobotParams, SignalFamily, SignalSpec, Trajectory};

/// Channel scale below which jumps are never flagged, in output units.
pub const DISCONTINUITY_MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Rows recorded before the first violation (all of them when clean).
    pub trajectory: Trajectory,
    pub violation: Option<BlacklistEntry>,
}

fn sample_signal<R: Rng + ?Sized>(
    robot: &RobotParams,
    job: &GenerationJob,
    family: SignalFamily,
    rng: &mut R,
) -> SignalSpec {
    let n = robot.model.n_links();
    let osc = &job.randomization.osc;
    let start = robot
        .model
        .forward_kinematics(&robot.initial_q)
        .expect("initial pose has one entry per joint");
    let base = OscConfig {
        kp: [osc.kp; 2],
        kd: [osc.kd; 2],
        lambda: osc.lambda,
        ..OscConfig::default()
    };
    match family {
        SignalFamily::Multisin | SignalFamily::Mixed => {
            SignalSpec::Multisin(MultiSinConfig::sample(robot.main_frequency, n, rng))
        }
        SignalFamily::Chirp => SignalSpec::Chirp(ChirpConfig::sample(robot.main_frequency, n, rng)),
        SignalFamily::OscCircle => {
            let radius = rng.gen_range(osc.radius_range[0]..=osc.radius_range[1]);
            SignalSpec::Osc(
                OscConfig {
                    task: OscTask::Circle,
                    radius,
                    frequency: osc.circle_frequency,
                    ..base
                }
                .anchored_at([start.x, start.y]),
            )
        }
        SignalFamily::OscSpiral => {
            let radius = rng.gen_range(osc.radius_range[0]..=osc.radius_range[1]);
            let frequency = rng.gen_range(osc.frequency_range[0]..=osc.frequency_range[1]);
            let direction = if rng.gen_bool(0.5) {
                SpiralDirection::Up
            } else {
                SpiralDirection::Down
            };
            SignalSpec::Osc(
                OscConfig {
                    task: OscTask::Spiral,
                    radius,
                    frequency,
                    direction,
                    spiral_rate: osc.spiral_span * radius / job.horizon(),
                    ..base
                }
                .anchored_at([start.x, start.y]),
            )
        }
    }
}

fn commanded_torque(model: &ArmModel, state: &ArmState, signal: &SignalSpec) -> Vec<f64> {
    match signal {
        SignalSpec::Osc(cfg) => osc_torque(model, state, cfg, state.t).unwrap_or_else(|_| vec![f64::NAN; model.n_links()]),
        open_loop => {
            // Open-loop excitation rides on top of gravity compensation.
            let g = model
                .gravity_torques(&state.q)
                .expect("state has one entry per joint");
            (0..model.n_links())
                .map(|j| {
                    let s = match open_loop {
                        SignalSpec::Multisin(c) => c.torque(j, state.t),
                        SignalSpec::Chirp(c) => c.torque(j, state.t),
                        SignalSpec::Osc(_) => unreachable!(),
                    };
                    g[j] + s
                })
                .collect()
        }
    }
}

/// Simulate one robot under its job's excitation family.
///
/// Torques are recomputed at every physics substep and constraint checks run at
/// every substep; the recorded row `k` holds the torque and pose at the start of
/// recorded step `k`. The rollout stops at the first violation.
pub fn rollout<R: Rng + ?Sized>(
    robot: &RobotParams,
    job: &GenerationJob,
    rng: &mut R,
) -> (SignalSpec, RolloutResult) {
    let family = job.family_of(robot.index as usize);
    let signal = sample_signal(robot, job, family, rng);
    let model = &robot.model;
    let n_u = model.n_links();
    let mut traj = Trajectory::new(job.dt, n_u, crate::arm::output_dim(n_u));
    let h = job.dt / job.substeps as f64;
    let mut state = ArmState::at_rest(robot.initial_q.clone());
    let violation = |kind, timestep| {
        Some(BlacklistEntry {
            robot: robot.index,
            violation: kind,
            timestep,
        })
    };

    for k in 0..job.timesteps {
        // Keep time on the recording grid to avoid drift from repeated addition.
        state.t = k as f64 * job.dt;
        for sub in 0..job.substeps {
            let tau = commanded_torque(model, &state, &signal);
            if tau.iter().any(|v| !v.is_finite()) {
                let result = RolloutResult {
                    trajectory: traj,
                    violation: violation(Violation::Diverged, k),
                };
                return (signal, result);
            }
            let found = model
                .check_violations(&state, &tau)
                .expect("state has one entry per joint");
            if let Some(kind) = found.first() {
                let result = RolloutResult {
                    trajectory: traj,
                    violation: violation(kind, k),
                };
                return (signal, result);
            }
            if sub == 0 {
                let pose = model.pose_output(&state.q).expect("state has one entry per joint");
                traj.push(&tau, &pose.to_vec());
            }
            state = match model.step(&state, &tau, h) {
                Ok(s) => s,
                Err(_) => {
                    let result = RolloutResult {
                        trajectory: traj,
                        violation: violation(Violation::Diverged, k),
                    };
                    return (signal, result);
                }
            };
        }
    }
    (
        signal,
        RolloutResult {
            trajectory: traj,
            violation: None,
        },
    )
}

/// First step whose output jump exceeds `threshold` times that channel's largest
/// previous step (floored at [`DISCONTINUITY_MIN_SCALE`]).
///
/// Finely sampled smooth motion changes its step size gradually, so a jump well
/// above every earlier step marks a glitch rather than dynamics.
pub fn detect_output_discontinuity(traj: &Trajectory, threshold: f64) -> Option<usize> {
    detect_output_discontinuity_with_floor(traj, threshold, DISCONTINUITY_MIN_SCALE)
}

pub fn detect_output_discontinuity_with_floor(
    traj: &Trajectory,
    threshold: f64,
    min_scale: f64,
) -> Option<usize> {
    let n_y = traj.n_y;
    let mut max_step = vec![0.0f64; n_y];
    for k in 1..traj.len() {
        let prev = traj.y_row(k - 1);
        let cur = traj.y_row(k);
        for c in 0..n_y {
            let jump = (cur[c] as f64 - prev[c] as f64).abs();
            if !jump.is_finite() {
                return Some(k);
            }
            if k >= 2 && jump > threshold * max_step[c].max(min_scale) {
                return Some(k);
            }
            max_step[c] = max_step[c].max(jump);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{robot_stream, sample_robot, RandomizationConfig};

    fn traj_from(ys: &[Vec<f64>]) -> Trajectory {
        let n_y = ys[0].len();
        let mut t = Trajectory::new(1.0 / 60.0, 1, n_y);
        for y in ys {
            t.push(&[0.0], y);
        }
        t
    }

    #[test]
    fn constant_trajectory_is_smooth() {
        let ys = vec![vec![0.3, -1.0]; 100];
        assert_eq!(detect_output_discontinuity(&traj_from(&ys), 5.0), None);
    }

    #[test]
    fn injected_jump_is_found() {
        let mut ys: Vec<Vec<f64>> = (0..1000)
            .map(|k| vec![(k as f64 * 0.05).sin(), 0.2 * k as f64 / 60.0])
            .collect();
        // Largest step of the sampled sinusoid is about amplitude·ω·dt.
        let scale = 0.05;
        for y in ys.iter_mut().skip(417) {
            y[0] += 10.0 * scale;
        }
        assert_eq!(detect_output_discontinuity(&traj_from(&ys), 5.0), Some(417));
    }

    #[test]
    fn smooth_sinusoids_pass() {
        for phase in [0.0, 0.5, 1.3, 3.0] {
            let ys: Vec<Vec<f64>> = (0..1000)
                .map(|k| {
                    let t = k as f64 / 60.0;
                    vec![(2.0 * std::f64::consts::PI * 0.2 * t + phase).cos(), 0.4 * (1.1 * t).sin()]
                })
                .collect();
            for threshold in [5.0, 8.0] {
                assert_eq!(detect_output_discontinuity(&traj_from(&ys), threshold), None);
            }
        }
    }

    fn robot(job: &GenerationJob, index: u32) -> RobotParams {
        let mut rng = robot_stream(job.randomization.seed, index);
        sample_robot(&job.nominal_arm(), &job.randomization, index, &mut rng)
    }

    #[test]
    fn zero_amplitude_on_compensated_pose_is_static() {
        let job = GenerationJob {
            timesteps: 200,
            ..Default::default()
        };
        let params = robot(&job, 0);
        let mut rng = robot_stream(0, 0);
        let (mut signal, _) = rollout(&params, &job, &mut rng);
        if let SignalSpec::Multisin(cfg) = &mut signal {
            for j in &mut cfg.joints {
                j.amplitudes = [0.0; 4];
            }
        }
        // Replay the rollout loop with the silenced signal.
        let model = &params.model;
        let mut state = ArmState::at_rest(params.initial_q.clone());
        let y0 = model.pose_output(&state.q).unwrap().to_vec();
        for _ in 0..job.timesteps * job.substeps {
            let tau = commanded_torque(model, &state, &signal);
            state = model.step(&state, &tau, job.dt / job.substeps as f64).unwrap();
        }
        let y1 = model.pose_output(&state.q).unwrap().to_vec();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_torque_limit_fails_immediately() {
        let job = GenerationJob {
            timesteps: 50,
            ..Default::default()
        };
        let mut params = robot(&job, 2);
        params.model.torque_limits = vec![0.0; 3];
        let (_, res) = rollout(&params, &job, &mut robot_stream(0, 2));
        assert!(res.trajectory.is_empty());
        let v = res.violation.unwrap();
        assert_eq!((v.violation, v.timestep), (Violation::TorqueSaturation, 0));
    }

    #[test]
    fn rollout_is_reproducible() {
        for family in [SignalFamily::Chirp, SignalFamily::OscSpiral] {
            let job = GenerationJob {
                timesteps: 100,
                family,
                randomization: RandomizationConfig {
                    seed: 5,
                    ..Default::default()
                },
                ..Default::default()
            };
            let params = robot(&job, 1);
            let (sa, a) = rollout(&params, &job, &mut robot_stream(5, 1));
            let (sb, b) = rollout(&params, &job, &mut robot_stream(5, 1));
            assert_eq!(sa, sb);
            assert_eq!(a.trajectory, b.trajectory);
            assert_eq!(a.violation, b.violation);
        }
    }
}
