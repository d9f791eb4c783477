//! Flag surfaces. Every flag is optional on the command line so that a JSON
//! config file can supply it; flags given explicitly win over the file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "robometa", version, about = "Meta-learned dynamics models for randomized planar arms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a population of randomized arms and write a dataset.
    Generate(GenerateArgs),
    /// Train a meta-model from scratch (or resume a run).
    Train(TrainArgs),
    /// Adapt a trained checkpoint to a new dataset.
    Finetune(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Context/horizon grid or encoder/decoder depth sweep.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Zero-shot, fine-tuned and scratch checkpoints side by side.
    Compare(CompareArgs),
    /// Finite-difference check of every autodiff primitive and the full loss.
    Gradcheck(GradcheckArgs),
    /// Dump one robot's (t, u, y) rows, optionally with model predictions.
    Simulate(SimulateArgs),
}

#[derive(Debug, Subcommand)]
pub enum SweepCommand {
    /// Evaluate a checkpoint over context fractions and horizons.
    ContextHorizon(SweepContextArgs),
    /// Train one model per depth and tabulate approach-A metrics per test set.
    Layers(SweepLayersArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset file to write; the manifest goes next to it as <out>.manifest.json [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Randomization seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Robots to simulate before blacklisting [default: 16]
    #[arg(long)]
    pub robots: Option<usize>,
    /// Recorded steps per robot, at 60 Hz [default: 1000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// multisin | chirp | mixed | osc_circle | osc_spiral [default: multisin]
    #[arg(long)]
    pub family: Option<String>,
    /// Mass variation: narrow (±5%) | default (±20%) | wide (±40%) [default: default]
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of links [default: 3]
    #[arg(long)]
    pub links: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training dataset [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, log and manifest [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parent checkpoint; required by finetune
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Continue a run from a checkpoint with optimizer state (train only)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Seed for initialization and batch sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps [default: 20000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Stop after this step, keeping the schedule of --steps [default: none]
    #[arg(long)]
    pub halt_at: Option<u64>,
    /// Distinct robots per batch [default: 16]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Context length as a fraction of the trajectory [default: 0.2]
    #[arg(long)]
    pub context_fraction: Option<f64>,
    /// mse | huber [default: mse]
    #[arg(long)]
    pub loss: Option<String>,
    /// Huber threshold in normalized units [default: 1.0]
    #[arg(long)]
    pub huber_delta: Option<f32>,
    /// Peak learning rate [default: 3e-4; 1e-4 for finetune]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate floor reached at --steps [default: lr / 10]
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// Linear warmup steps [default: 200]
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Global gradient-norm bound [default: 1.0]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Validation cadence in steps, 0 disables [default: 100]
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Cadence of last.rmck writes in steps [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Validation robots scored per evaluation [default: 64]
    #[arg(long)]
    pub val_robots: Option<usize>,
    /// Encoder and decoder layers each [default: 4]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Model width [default: 128]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 512]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Dropout probability [default: 0.0]
    #[arg(long)]
    pub dropout: Option<f32>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint to score [required]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test dataset [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// A (per-robot average) | B (merged coordinates) [default: A]
    #[arg(long)]
    pub approach: Option<String>,
    /// Test context as a fraction of the trajectory [default: 0.2]
    #[arg(long)]
    pub context_fraction: Option<f64>,
    /// Query length in steps [default: rest of the trajectory]
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Score at most this many robots [default: all]
    #[arg(long)]
    pub max_robots: Option<usize>,
    /// Seed for robot subsampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepContextArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint to score [required]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test dataset [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated context fractions [default: 0.05,0.1,0.2]
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Comma-separated query lengths in steps [default: rest of the trajectory]
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// A | B [default: A]
    #[arg(long)]
    pub approach: Option<String>,
    /// Score at most this many robots [default: all]
    #[arg(long)]
    pub max_robots: Option<usize>,
    /// Seed for robot subsampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepLayersArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training dataset [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test sets as name=path, repeatable [default: validation split of --data as "val"]
    #[arg(long)]
    pub test: Option<Vec<String>>,
    /// Output directory [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated depths (encoder = decoder) [default: 2,4,6]
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Seed for initialization and batch sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps per model [default: 20000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Distinct robots per batch [default: 16]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Context length as a fraction of the trajectory [default: 0.2]
    #[arg(long)]
    pub context_fraction: Option<f64>,
    /// Peak learning rate [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup steps [default: 200]
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Validation cadence in steps, 0 disables [default: 100]
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Model width [default: 128]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 512]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Score at most this many robots per test set [default: all]
    #[arg(long)]
    pub max_robots: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Pre-trained checkpoint used as is [required]
    #[arg(long)]
    pub zero: Option<PathBuf>,
    /// Fine-tuned checkpoint [required]
    #[arg(long)]
    pub ft: Option<PathBuf>,
    /// Checkpoint trained only on the target family [required]
    #[arg(long)]
    pub scratch: Option<PathBuf>,
    /// Test dataset [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test context as a fraction of the trajectory [default: 0.2]
    #[arg(long)]
    pub context_fraction: Option<f64>,
    /// Score at most this many robots [default: all]
    #[arg(long)]
    pub max_robots: Option<usize>,
    /// Seed for robot subsampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Write the results as JSON here [default: stdout only]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the end-to-end probe model [default: 5]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateArgs {
    /// Flat JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset holding the robot [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Robot index as stored in the dataset [default: first kept robot]
    #[arg(long)]
    pub robot: Option<u32>,
    /// Add model predictions for the query window from this checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Context fraction used for predictions [default: 0.2]
    #[arg(long)]
    pub context_fraction: Option<f64>,
    /// CSV file to write [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
}
