//! Domain-randomized trajectory generation.
//!
//! Each robot draws its physical parameters and its excitation signal from a
//! private random stream keyed by `(seed, robot index)`, so a dataset is
//! bit-reproducible regardless of how many workers roll robots out.

mod io;
mod rollout;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arm::{ArmModel, Violation};
use crate::error::{Error, Result};
use crate::excitation::{ChirpConfig, MultiSinConfig, OscConfig};

pub use io::{load_dataset, manifest_path, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use rollout::{
    detect_output_discontinuity, detect_output_discontinuity_with_floor, rollout, RolloutResult,
    DISCONTINUITY_MIN_SCALE,
};

/// Mass-variation presets for in- and out-of-distribution experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Narrow,
    Default,
    Wide,
}

impl Preset {
    pub fn mass_variation(self) -> f64 {
        match self {
            Preset::Narrow => 0.05,
            Preset::Default => 0.20,
            Preset::Wide => 0.40,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narrow" => Ok(Preset::Narrow),
            "default" => Ok(Preset::Default),
            "wide" => Ok(Preset::Wide),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

/// Ranges for the operational-space tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscRandomization {
    pub kp: f64,
    pub kd: f64,
    pub radius_range: [f64; 2],
    /// Spiral angular rate range (Hz).
    pub frequency_range: [f64; 2],
    /// Circles share one angular rate (Hz).
    pub circle_frequency: f64,
    /// Fraction of the initial radius the spiral grows or shrinks by over the rollout.
    pub spiral_span: f64,
    pub lambda: f64,
}

impl Default for OscRandomization {
    fn default() -> Self {
        OscRandomization {
            kp: 400.0,
            kd: 40.0,
            radius_range: [0.05, 0.15],
            frequency_range: [0.05, 0.15],
            circle_frequency: 0.1,
            spiral_span: 0.5,
            lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    /// Symmetric relative mass variation: `m ~ U[(1-x) m̄, (1+x) m̄]`.
    pub mass_variation: f64,
    /// Bound (m) on the perturbation of each center-of-mass offset along its link.
    pub com_variation: f64,
    pub damping_range: [f64; 2],
    pub stiffness_range: [f64; 2],
    /// Half-width (rad) of the initial joint position window around `mid_positions`.
    pub initial_q_bound: f64,
    /// Joint positions the initial pose is drawn around. Empty means the nominal default.
    pub mid_positions: Vec<f64>,
    /// Range of the main excitation frequency `f_m` (Hz).
    pub main_frequency_range: [f64; 2],
    pub osc: OscRandomization,
    pub seed: u64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig {
            mass_variation: Preset::Default.mass_variation(),
            com_variation: 0.02,
            damping_range: [0.5, 2.0],
            stiffness_range: [5.0, 20.0],
            initial_q_bound: 0.5,
            mid_positions: Vec::new(),
            main_frequency_range: [0.1, 0.25],
            osc: OscRandomization::default(),
            seed: 0,
        }
    }
}

pub fn default_mid_positions(n_links: usize) -> Vec<f64> {
    match n_links {
        3 => vec![1.4, -0.7, -0.7],
        n => (0..n).map(|i| if i == 0 { 1.4 } else { -0.5 }).collect(),
    }
}

impl RandomizationConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.mass_variation = preset.mass_variation();
        self
    }

    pub fn mid_positions_for(&self, n_links: usize) -> Vec<f64> {
        if self.mid_positions.is_empty() {
            default_mid_positions(n_links)
        } else {
            self.mid_positions.clone()
        }
    }

    pub fn validate(&self, nominal: &ArmModel) -> Result<()> {
        if !(0.0..1.0).contains(&self.mass_variation) {
            return Err(Error::Config(format!(
                "mass_variation must lie in [0, 1), got {}",
                self.mass_variation
            )));
        }
        let ranges = [
            ("damping_range", self.damping_range),
            ("stiffness_range", self.stiffness_range),
            ("main_frequency_range", self.main_frequency_range),
            ("osc.radius_range", self.osc.radius_range),
            ("osc.frequency_range", self.osc.frequency_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-empty, non-negative interval")));
            }
        }
        if self.com_variation < 0.0 || self.initial_q_bound < 0.0 {
            return Err(Error::Config("variation bounds must be non-negative".into()));
        }
        let mid = self.mid_positions_for(nominal.n_links());
        if mid.len() != nominal.n_links() {
            return Err(Error::Dimension {
                what: "mid_positions",
                expected: nominal.n_links(),
                actual: mid.len(),
            });
        }
        for (i, (m, lim)) in mid.iter().zip(&nominal.joint_position_limits).enumerate() {
            if (m.abs() + self.initial_q_bound) >= *lim {
                return Err(Error::Config(format!(
                    "initial window for joint {i} reaches its position limit"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalFamily {
    Multisin,
    Chirp,
    Mixed,
    OscCircle,
    OscSpiral,
}

impl SignalFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalFamily::Multisin => "multisin",
            SignalFamily::Chirp => "chirp",
            SignalFamily::Mixed => "mixed",
            SignalFamily::OscCircle => "osc_circle",
            SignalFamily::OscSpiral => "osc_spiral",
        }
    }
}

impl std::str::FromStr for SignalFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multisin" => Ok(SignalFamily::Multisin),
            "chirp" => Ok(SignalFamily::Chirp),
            "mixed" => Ok(SignalFamily::Mixed),
            "osc_circle" => Ok(SignalFamily::OscCircle),
            "osc_spiral" => Ok(SignalFamily::OscSpiral),
            other => Err(Error::Config(format!("unknown signal family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixComponent {
    pub family: SignalFamily,
    pub num_robots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationJob {
    pub num_robots: usize,
    /// Recorded steps per robot.
    pub timesteps: usize,
    /// Recording period (s).
    pub dt: f64,
    /// Physics steps per recorded step.
    pub substeps: usize,
    pub family: SignalFamily,
    /// Sub-job composition for `Mixed`; robots are assigned to components in order.
    /// Empty means an even multisin/chirp split.
    pub mix: Vec<MixComponent>,
    pub randomization: RandomizationConfig,
    pub n_links: usize,
    /// Overrides applied to the nominal arm before randomization.
    pub torque_limit: f64,
    pub joint_limit: f64,
    pub floor_height: f64,
    /// Non-adjacent links closer than this (m) self-collide; zero disables the check.
    pub self_collision_clearance: f64,
    /// Jump ratio above which an output step counts as a discontinuity.
    pub discontinuity_threshold: f64,
}

impl Default for GenerationJob {
    fn default() -> Self {
        GenerationJob {
            num_robots: 16,
            timesteps: 1000,
            dt: 1.0 / 60.0,
            substeps: 10,
            family: SignalFamily::Multisin,
            mix: Vec::new(),
            randomization: RandomizationConfig::default(),
            n_links: 3,
            torque_limit: crate::arm::DEFAULT_TORQUE_LIMIT,
            joint_limit: crate::arm::DEFAULT_JOINT_LIMIT,
            floor_height: crate::arm::DEFAULT_FLOOR_HEIGHT,
            self_collision_clearance: crate::arm::DEFAULT_SELF_CLEARANCE,
            discontinuity_threshold: 6.0,
        }
    }
}

impl GenerationJob {
    pub fn nominal_arm(&self) -> ArmModel {
        let mut arm = ArmModel::nominal(self.n_links);
        arm.torque_limits = vec![self.torque_limit; self.n_links];
        arm.joint_position_limits = vec![self.joint_limit; self.n_links];
        arm.floor_height = self.floor_height;
        arm.self_collision_clearance = self.self_collision_clearance;
        arm
    }

    pub fn n_u(&self) -> usize {
        self.n_links
    }

    pub fn n_y(&self) -> usize {
        crate::arm::output_dim(self.n_links)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_robots < 1 {
            return Err(Error::Config("num_robots must be at least 1".into()));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be at least 2".into()));
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::Config("dt must be positive and substeps at least 1".into()));
        }
        if self.n_links == 0 {
            return Err(Error::Config("n_links must be at least 1".into()));
        }
        if matches!(self.family, SignalFamily::OscCircle | SignalFamily::OscSpiral) && self.n_links < 2 {
            return Err(Error::Config("OSC families need at least 2 links".into()));
        }
        if self.family == SignalFamily::Mixed && !self.mix.is_empty() {
            let total: usize = self.mix.iter().map(|c| c.num_robots).sum();
            if total != self.num_robots {
                return Err(Error::Config(format!(
                    "mix components cover {total} robots but num_robots is {}",
                    self.num_robots
                )));
            }
            if self.mix.iter().any(|c| c.family == SignalFamily::Mixed) {
                return Err(Error::Config("mix components cannot be mixed themselves".into()));
            }
        }
        let nominal = self.nominal_arm();
        nominal.validate()?;
        self.randomization.validate(&nominal)
    }

    /// Concrete signal family of robot `index`.
    pub fn family_of(&self, index: usize) -> SignalFamily {
        if self.family != SignalFamily::Mixed {
            return self.family;
        }
        if self.mix.is_empty() {
            let half = self.num_robots.div_ceil(2);
            return if index < half {
                SignalFamily::Multisin
            } else {
                SignalFamily::Chirp
            };
        }
        let mut start = 0;
        for c in &self.mix {
            if index < start + c.num_robots {
                return c.family;
            }
            start += c.num_robots;
        }
        self.mix.last().map(|c| c.family).unwrap_or(SignalFamily::Multisin)
    }

    pub fn horizon(&self) -> f64 {
        self.timesteps as f64 * self.dt
    }
}

/// One sampled robot instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub index: u32,
    pub model: ArmModel,
    pub initial_q: Vec<f64>,
    /// Main excitation frequency `f_m` (Hz).
    pub main_frequency: f64,
}

/// Torque inputs and pose outputs of one robot, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub n_u: usize,
    pub n_y: usize,
    pub u: Vec<f32>,
    pub y: Vec<f32>,
}

impl Trajectory {
    pub fn new(dt: f64, n_u: usize, n_y: usize) -> Self {
        Trajectory {
            dt,
            n_u,
            n_y,
            u: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.n_u == 0 {
            0
        } else {
            self.u.len() / self.n_u
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn u_row(&self, k: usize) -> &[f32] {
        &self.u[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn y_row(&self, k: usize) -> &[f32] {
        &self.y[k * self.n_y..(k + 1) * self.n_y]
    }

    pub fn push(&mut self, u: &[f64], y: &[f64]) {
        self.u.extend(u.iter().map(|v| *v as f32));
        self.y.extend(y.iter().map(|v| *v as f32));
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.y).all(|v| v.is_finite())
    }

    /// Values of output channel `c` over time.
    pub fn y_channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.y[k * self.n_y + c] as f64).collect()
    }
}

/// Excitation actually applied to one robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SignalSpec {
    Multisin(MultiSinConfig),
    Chirp(ChirpConfig),
    Osc(OscConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlacklistEntry {
    pub robot: u32,
    pub violation: Violation,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(n_u: usize, n_y: usize) -> Self {
        NormalizationStats {
            u_mean: vec![0.0; n_u],
            u_std: vec![1.0; n_u],
            y_mean: vec![0.0; n_y],
            y_std: vec![1.0; n_y],
        }
    }

    /// Per-channel mean and population standard deviation over every row of every record.
    /// Constant channels get a unit scale so normalization only centers them.
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory> + Clone, n_u: usize, n_y: usize) -> Self {
        fn channel_stats<'a>(
            trajs: impl IntoIterator<Item = &'a Trajectory> + Clone,
            dim: usize,
            pick: fn(&Trajectory) -> &[f32],
        ) -> (Vec<f64>, Vec<f64>) {
            let mut count = 0usize;
            let mut sum = vec![0.0f64; dim];
            for t in trajs.clone() {
                for row in pick(t).chunks_exact(dim) {
                    for (s, v) in sum.iter_mut().zip(row) {
                        *s += *v as f64;
                    }
                    count += 1;
                }
            }
            let n = count.max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let mut sq = vec![0.0f64; dim];
            for t in trajs {
                for row in pick(t).chunks_exact(dim) {
                    for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                        *s += (*v as f64 - m).powi(2);
                    }
                }
            }
            let std = sq
                .iter()
                .map(|s| {
                    let sd = (s / n).sqrt();
                    if sd > 1e-12 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, std)
        }
        let (u_mean, u_std) = channel_stats(trajs.clone(), n_u, |t| &t.u);
        let (y_mean, y_std) = channel_stats(trajs, n_y, |t| &t.y);
        NormalizationStats {
            u_mean,
            u_std,
            y_mean,
            y_std,
        }
    }

    pub fn normalize_u(&self, row: &[f32], out: &mut Vec<f32>) {
        out.extend(
            row.iter()
                .zip(self.u_mean.iter().zip(&self.u_std))
                .map(|(v, (m, s))| ((*v as f64 - m) / s) as f32),
        );
    }

    pub fn normalize_y(&self, row: &[f32], out: &mut Vec<f32>) {
        out.extend(
            row.iter()
                .zip(self.y_mean.iter().zip(&self.y_std))
                .map(|(v, (m, s))| ((*v as f64 - m) / s) as f32),
        );
    }

    pub fn denormalize_y(&self, normalized: &[f32]) -> Vec<f64> {
        let n_y = self.y_mean.len();
        normalized
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % n_y;
                *v as f64 * self.y_std[c] + self.y_mean[c]
            })
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("stats serialize");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(12)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub job: GenerationJob,
    pub seed: u64,
    pub num_kept: usize,
    pub num_blacklisted: usize,
    /// Robot indices of the stored records, in file order.
    pub kept: Vec<u32>,
    pub blacklist: Vec<BlacklistEntry>,
    pub stats: NormalizationStats,
    /// Signal actually applied to each kept robot, in file order.
    pub signals: Vec<SignalSpec>,
}

impl Manifest {
    pub fn fingerprint(&self) -> String {
        self.stats.fingerprint()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub params: RobotParams,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn n_u(&self) -> usize {
        self.manifest.job.n_u()
    }

    pub fn n_y(&self) -> usize {
        self.manifest.job.n_y()
    }

    pub fn n_steps(&self) -> usize {
        self.manifest.job.timesteps
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.manifest.stats
    }

    /// Record positions split into (training, validation). About one robot in ten,
    /// chosen by a hash of its robot index, is held out.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (pos, r) in self.records.iter().enumerate() {
            if is_validation_robot(r.params.index) {
                val.push(pos);
            } else {
                train.push(pos);
            }
        }
        (train, val)
    }

    /// Keep only the records at the given positions, preserving statistics and job.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        let records: Vec<Record> = positions.iter().map(|&p| self.records[p].clone()).collect();
        let mut manifest = self.manifest.clone();
        manifest.kept = records.iter().map(|r| r.params.index).collect();
        manifest.signals = positions
            .iter()
            .filter_map(|&p| self.manifest.signals.get(p).cloned())
            .collect();
        manifest.num_kept = records.len();
        Dataset { records, manifest }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn is_validation_robot(index: u32) -> bool {
    splitmix64(index as u64) % 10 == 0
}

/// Random stream owned by one robot.
pub fn robot_stream(seed: u64, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_robot<R: Rng + ?Sized>(
    nominal: &ArmModel,
    cfg: &RandomizationConfig,
    index: u32,
    rng: &mut R,
) -> RobotParams {
    let n = nominal.n_links();
    let mut model = nominal.clone();
    let x = cfg.mass_variation;
    for i in 0..n {
        let m_nom = nominal.link_masses[i];
        let m = if x > 0.0 {
            rng.gen_range((1.0 - x) * m_nom..=(1.0 + x) * m_nom)
        } else {
            m_nom
        };
        model.link_masses[i] = m;
        model.link_inertias[i] = nominal.link_inertias[i] * m / m_nom;
        let dc = if cfg.com_variation > 0.0 {
            rng.gen_range(-cfg.com_variation..=cfg.com_variation)
        } else {
            0.0
        };
        model.com_offsets[i] = (nominal.com_offsets[i] + dc).clamp(0.0, nominal.link_lengths[i]);
        model.joint_damping[i] = uniform(rng, cfg.damping_range);
        model.joint_stiffness[i] = uniform(rng, cfg.stiffness_range);
    }
    let mid = cfg.mid_positions_for(n);
    let b = cfg.initial_q_bound;
    let initial_q: Vec<f64> = mid
        .iter()
        .zip(&nominal.joint_position_limits)
        .map(|(m, lim)| {
            let q = if b > 0.0 { m + rng.gen_range(-b..=b) } else { *m };
            q.clamp(-0.999 * lim, 0.999 * lim)
        })
        .collect();
    // Joint springs hold the arm around the pose it starts in.
    model.rest_positions = initial_q.clone();
    let main_frequency = uniform(rng, cfg.main_frequency_range);
    RobotParams {
        index,
        model,
        initial_q,
        main_frequency,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Outcome of one robot before dataset assembly.
#[derive(Debug, Clone)]
pub struct RobotRun {
    pub params: RobotParams,
    pub signal: SignalSpec,
    pub result: RolloutResult,
}

/// Sample and roll out robot `index` of `job`.
pub fn run_robot(job: &GenerationJob, nominal: &ArmModel, index: u32) -> RobotRun {
    run_robot_with(job, nominal, index, &|_| {})
}

fn run_robot_with(
    job: &GenerationJob,
    nominal: &ArmModel,
    index: u32,
    hook: &(dyn Fn(&mut RobotParams) + Sync),
) -> RobotRun {
    let mut rng = robot_stream(job.randomization.seed, index);
    let mut params = sample_robot(nominal, &job.randomization, index, &mut rng);
    hook(&mut params);
    let (signal, result) = rollout(&params, job, &mut rng);
    RobotRun {
        params,
        signal,
        result,
    }
}

pub fn generate(job: &GenerationJob) -> Result<Dataset> {
    generate_with_hook(job, |_| {})
}

/// Like [`generate`], with a hook that may edit each robot after sampling.
pub fn generate_with_hook<F>(job: &GenerationJob, hook: F) -> Result<Dataset>
where
    F: Fn(&mut RobotParams) + Sync,
{
    job.validate()?;
    let nominal = job.nominal_arm();
    let runs: Vec<RobotRun> = (0..job.num_robots as u32)
        .into_par_iter()
        .map(|i| run_robot_with(job, &nominal, i, &hook))
        .collect();
    assemble(job, runs)
}

fn assemble(job: &GenerationJob, runs: Vec<RobotRun>) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut signals = Vec::new();
    let mut blacklist = Vec::new();
    for run in runs {
        let entry = match run.result.violation {
            Some(v) => Some(v),
            None => detect_output_discontinuity(&run.result.trajectory, job.discontinuity_threshold)
                .map(|step| BlacklistEntry {
                    robot: run.params.index,
                    violation: Violation::OutputDiscontinuity,
                    timestep: step,
                }),
        };
        match entry {
            Some(e) => blacklist.push(e),
            None => {
                signals.push(run.signal);
                records.push(Record {
                    params: run.params,
                    trajectory: run.result.trajectory,
                });
            }
        }
    }
    if records.is_empty() {
        let mut counts: BTreeMap<Violation, usize> = BTreeMap::new();
        for e in &blacklist {
            *counts.entry(e.violation).or_default() += 1;
        }
        let dominant = counts
            .iter()
            .max_by_key(|(v, c)| (**c, std::cmp::Reverse(**v)))
            .map(|(v, _)| v.to_string())
            .unwrap_or_else(|| "none".into());
        return Err(Error::EmptyDataset {
            num_robots: job.num_robots,
            dominant,
        });
    }
    let stats = NormalizationStats::from_trajectories(
        records.iter().map(|r| &r.trajectory),
        job.n_u(),
        job.n_y(),
    );
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        job: job.clone(),
        seed: job.randomization.seed,
        num_kept: records.len(),
        num_blacklisted: blacklist.len(),
        kept: records.iter().map(|r| r.params.index).collect(),
        blacklist,
        stats,
        signals,
    };
    Ok(Dataset { records, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_job(family: SignalFamily) -> GenerationJob {
        GenerationJob {
            num_robots: 8,
            timesteps: 120,
            family,
            ..Default::default()
        }
    }

    fn generous(mut job: GenerationJob) -> GenerationJob {
        job.torque_limit = 1e6;
        job.joint_limit = 1e3;
        job.floor_height = -1e3;
        job.self_collision_clearance = 0.0;
        job.randomization.initial_q_bound = 0.1;
        job
    }

    #[test]
    fn zero_mass_variation_keeps_nominal_masses() {
        let nominal = ArmModel::nominal(3);
        let cfg = RandomizationConfig {
            mass_variation: 0.0,
            ..Default::default()
        };
        let mut rng = robot_stream(1, 0);
        let p = sample_robot(&nominal, &cfg, 0, &mut rng);
        assert_eq!(p.model.link_masses, nominal.link_masses);
    }

    #[test]
    fn sampled_masses_stay_in_bounds() {
        let nominal = ArmModel::nominal(3);
        let cfg = RandomizationConfig::default();
        let mut lo = vec![f64::INFINITY; 3];
        let mut hi = vec![f64::NEG_INFINITY; 3];
        for i in 0..10_000u32 {
            let mut rng = robot_stream(42, i);
            let p = sample_robot(&nominal, &cfg, i, &mut rng);
            for j in 0..3 {
                lo[j] = lo[j].min(p.model.link_masses[j]);
                hi[j] = hi[j].max(p.model.link_masses[j]);
                assert!(p.model.com_offsets[j] >= 0.0 && p.model.com_offsets[j] <= p.model.link_lengths[j]);
                assert!(p.main_frequency >= 0.1 && p.main_frequency <= 0.25);
            }
            p.model.validate().unwrap();
        }
        for j in 0..3 {
            assert!(lo[j] >= 0.8 * nominal.link_masses[j]);
            assert!(hi[j] <= 1.2 * nominal.link_masses[j]);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_index() {
        let nominal = ArmModel::nominal(3);
        let cfg = RandomizationConfig::default();
        let a = sample_robot(&nominal, &cfg, 5, &mut robot_stream(7, 5));
        let b = sample_robot(&nominal, &cfg, 5, &mut robot_stream(7, 5));
        let c = sample_robot(&nominal, &cfg, 6, &mut robot_stream(7, 6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generous_limits_keep_everyone() {
        let ds = generate(&generous(small_job(SignalFamily::Multisin))).unwrap();
        assert_eq!(ds.len(), 8);
        assert!(ds.manifest.blacklist.is_empty());
        for r in &ds.records {
            assert_eq!(r.trajectory.len(), 120);
            assert!(r.trajectory.is_finite());
        }
    }

    #[test]
    fn targeted_violation_blacklists_one_robot() {
        let job = generous(small_job(SignalFamily::Chirp));
        let ds = generate_with_hook(&job, |p| {
            if p.index == 3 {
                p.model.torque_limits = vec![0.0; 3];
            }
        })
        .unwrap();
        assert_eq!(ds.manifest.blacklist.len(), 1);
        let e = &ds.manifest.blacklist[0];
        assert_eq!(e.robot, 3);
        assert_eq!(e.violation, Violation::TorqueSaturation);
        assert_eq!(e.timestep, 0);
        assert!(!ds.manifest.kept.contains(&3));
    }

    #[test]
    fn all_blacklisted_is_an_error() {
        let mut job = small_job(SignalFamily::Multisin);
        job.torque_limit = 0.0;
        match generate(&job) {
            Err(Error::EmptyDataset { num_robots, dominant }) => {
                assert_eq!(num_robots, 8);
                assert_eq!(dominant, "torque_saturation");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partition_and_clean_records() {
        for family in [
            SignalFamily::Multisin,
            SignalFamily::Chirp,
            SignalFamily::Mixed,
            SignalFamily::OscCircle,
            SignalFamily::OscSpiral,
        ] {
            let mut job = small_job(family);
            job.num_robots = 12;
            job.randomization.seed = 99;
            let ds = generate(&job).unwrap();
            let mut all: Vec<u32> = ds.manifest.kept.clone();
            all.extend(ds.manifest.blacklist.iter().map(|e| e.robot));
            all.sort_unstable();
            assert_eq!(all, (0..12).collect::<Vec<_>>(), "{family:?}");
            for r in &ds.records {
                let traj = &r.trajectory;
                assert_eq!(traj.len(), job.timesteps);
                assert!(traj.is_finite());
                for k in 0..traj.len() {
                    let state = crate::arm::ArmState::at_rest(
                        traj.y_row(k)[4..].iter().map(|v| *v as f64).collect(),
                    );
                    let tau: Vec<f64> = traj.u_row(k).iter().map(|v| *v as f64).collect();
                    // Stored values are f32, so test a hair inside the limits.
                    let mut relaxed = r.params.model.clone();
                    relaxed.torque_limits.iter_mut().for_each(|l| *l *= 1.0 + 1e-6);
                    relaxed.joint_position_limits.iter_mut().for_each(|l| *l *= 1.0 + 1e-6);
                    relaxed.floor_height -= 1e-6;
                    relaxed.self_collision_clearance *= 1.0 - 1e-3;
                    assert!(relaxed.check_violations(&state, &tau).unwrap().is_empty());
                }
                assert!(detect_output_discontinuity(traj, job.discontinuity_threshold).is_none());
            }
        }
    }

    #[test]
    fn mixed_assigns_families_in_order() {
        let job = GenerationJob {
            num_robots: 5,
            family: SignalFamily::Mixed,
            mix: vec![
                MixComponent { family: SignalFamily::Chirp, num_robots: 2 },
                MixComponent { family: SignalFamily::OscSpiral, num_robots: 3 },
            ],
            ..Default::default()
        };
        job.validate().unwrap();
        let fams: Vec<_> = (0..5).map(|i| job.family_of(i)).collect();
        assert_eq!(
            fams,
            vec![
                SignalFamily::Chirp,
                SignalFamily::Chirp,
                SignalFamily::OscSpiral,
                SignalFamily::OscSpiral,
                SignalFamily::OscSpiral
            ]
        );
        let bad = GenerationJob { num_robots: 6, ..job };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generation_independent_of_worker_count() {
        let mut job = small_job(SignalFamily::Mixed);
        job.num_robots = 10;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| generate(&job)).unwrap();
        let b = three.install(|| generate(&job)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_centers_and_scales() {
        let ds = generate(&small_job(SignalFamily::Multisin)).unwrap();
        let stats = ds.stats();
        for c in 0..ds.n_y() {
            let vals: Vec<f64> = ds
                .records
                .iter()
                .flat_map(|r| r.trajectory.y_channel(c))
                .map(|v| (v - stats.y_mean[c]) / stats.y_std[c])
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((sd - 1.0).abs() < 1e-6);
        }
        assert!(stats.u_std.iter().chain(&stats.y_std).all(|s| *s > 0.0));
    }

    #[test]
    fn validation_split_is_about_a_tenth() {
        let held = (0..10_000u32).filter(|i| is_validation_robot(*i)).count();
        assert!((800..1200).contains(&held), "{held}");
    }

    #[test]
    fn invalid_jobs_rejected() {
        let mut job = GenerationJob { timesteps: 1, ..Default::default() };
        assert!(job.validate().is_err());
        job.timesteps = 10;
        job.randomization.mass_variation = 1.0;
        assert!(job.validate().is_err());
    }
}
