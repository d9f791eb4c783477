//! Meta-training and fine-tuning.
//!
//! Each step draws a batch of distinct training robots, splits every trajectory
//! into a context prefix and a query suffix, and fits the query outputs. Robots
//! in a batch run on independent tapes (in parallel when workers are
//! available) and their gradients are summed in batch order, so results do not
//! depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, NormalizationStats, Record};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{save_checkpoint, Checkpoint, MetaModel, Mode, TransformerConfig};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, StepOutcome, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// Huber penalty with threshold `delta` in normalized units.
    Huber { delta: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_robots: usize,
    pub context_fraction: f64,
    pub loss: LossKind,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Floor the cosine decay settles at after `max_steps`.
    pub min_lr: f64,
    pub max_steps: u64,
    pub grad_clip: f64,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: u64,
    /// Cadence for writing `last.rmck` when `out_dir` is set.
    pub checkpoint_every: u64,
    /// At most this many validation robots are scored per evaluation.
    pub val_robots: usize,
    pub seed: u64,
    /// Stop after this step while keeping the schedule of `max_steps`; used to
    /// split a run for resumption.
    pub halt_at: Option<u64>,
    pub max_consecutive_skips: u32,
    pub adam: AdamConfig,
    pub fine_tune_from: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_robots: 16,
            context_fraction: 0.2,
            loss: LossKind::Mse,
            warmup_steps: 200,
            peak_lr: 3e-4,
            min_lr: 3e-5,
            max_steps: 20_000,
            grad_clip: 1.0,
            eval_every: 100,
            checkpoint_every: 1000,
            val_robots: 64,
            seed: 0,
            halt_at: None,
            max_consecutive_skips: 10,
            adam: AdamConfig::default(),
            fine_tune_from: None,
            out_dir: None,
        }
    }
}

/// Peak learning rate used by fine-tuning unless overridden.
pub const FINE_TUNE_PEAK_LR: f64 = 1e-4;

impl TrainConfig {
    pub fn fine_tune_defaults() -> Self {
        TrainConfig {
            peak_lr: FINE_TUNE_PEAK_LR,
            min_lr: FINE_TUNE_PEAK_LR / 10.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.context_fraction > 0.0 && self.context_fraction < 1.0) {
            return Err(Error::Config(format!(
                "context_fraction must lie in (0, 1), got {}",
                self.context_fraction
            )));
        }
        if self.batch_robots == 0 {
            return Err(Error::Config("batch_robots must be at least 1".into()));
        }
        if !(self.peak_lr >= 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::Config("learning rates must satisfy 0 <= min_lr <= peak_lr".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if let LossKind::Huber { delta } = self.loss {
            if !(delta > 0.0) {
                return Err(Error::Config("huber delta must be positive".into()));
            }
        }
        Ok(())
    }

    /// Warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay to
    /// `min_lr` at `max_steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.max_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Context length `round(fraction · n)`, at least one step and leaving at least
/// one query step.
pub fn context_length(n: usize, fraction: f64) -> Result<usize> {
    let m = (fraction * n as f64).round() as usize;
    if m == 0 || m >= n {
        return Err(Error::Config(format!(
            "context fraction {fraction} of {n} steps leaves no context or no query"
        )));
    }
    Ok(m)
}

/// One robot's normalized context/query split.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub robot: u32,
    pub u_ctx: Tensor,
    pub y_ctx: Tensor,
    pub u_query: Tensor,
    pub y_query: Tensor,
}

fn normalized(rows: &[f32], dim: usize, steps: std::ops::Range<usize>, stats: &NormalizationStats, is_u: bool) -> Tensor {
    let mut out = Vec::with_capacity(steps.len() * dim);
    for k in steps.clone() {
        let row = &rows[k * dim..(k + 1) * dim];
        if is_u {
            stats.normalize_u(row, &mut out);
        } else {
            stats.normalize_y(row, &mut out);
        }
    }
    Tensor::new(vec![steps.len(), dim], out).expect("rows match dims")
}

/// Splits a record at `m` and normalizes both halves; `horizon` limits the
/// query length (default: the rest of the trajectory).
pub fn example_from(record: &Record, stats: &NormalizationStats, m: usize, horizon: Option<usize>) -> Result<Example> {
    let t = &record.trajectory;
    let n = t.len();
    let end = m + horizon.unwrap_or(n.saturating_sub(m));
    if m == 0 || end > n || end <= m {
        return Err(Error::Config(format!(
            "context {m} with horizon {:?} does not fit a {n}-step trajectory",
            horizon
        )));
    }
    Ok(Example {
        robot: record.params.index,
        u_ctx: normalized(&t.u, t.n_u, 0..m, stats, true),
        y_ctx: normalized(&t.y, t.n_y, 0..m, stats, false),
        u_query: normalized(&t.u, t.n_u, m..end, stats, true),
        y_query: normalized(&t.y, t.n_y, m..end, stats, false),
    })
}

/// Draws `batch_robots` distinct records from `pool` (record positions).
pub fn make_batch(
    ds: &Dataset,
    pool: &[usize],
    cfg: &TrainConfig,
    stats: &NormalizationStats,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    if pool.len() < cfg.batch_robots {
        return Err(Error::Data(format!(
            "{} training robots cannot fill a batch of {}",
            pool.len(),
            cfg.batch_robots
        )));
    }
    let m = context_length(ds.n_steps(), cfg.context_fraction)?;
    sample(rng, pool.len(), cfg.batch_robots)
        .into_iter()
        .map(|i| example_from(&ds.records[pool[i]], stats, m, None))
        .collect()
}

/// Random stream for the batch at `step`; independent of earlier steps so a
/// resumed run draws the same batches.
pub fn batch_stream(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Loss of one example and its parameter gradients.
pub fn example_loss_and_grads(model: &MetaModel, ex: &Example, loss: LossKind, mode: Mode) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, mode);
    let out = net.forward(&mut tape, &ex.u_ctx, &ex.y_ctx, &ex.u_query)?;
    let params = net.param_vars().to_vec();
    let target = tape.constant(ex.y_query.clone());
    let l = match loss {
        LossKind::Mse => tape.mse(out, target)?,
        LossKind::Huber { delta } => tape.huber(out, target, delta)?,
    };
    let value = tape.value(l).item() as f64;
    tape.backward(l)?;
    let grads = params
        .into_iter()
        .map(|p| tape.take_grad(p).expect("parameters are trainable"))
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean gradient over a batch, reduced in batch order.
pub fn batch_loss_and_grads(
    model: &MetaModel,
    batch: &[Example],
    loss: LossKind,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>)> {
    let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mode = match dropout_seed {
                Some(s) => Mode::Train {
                    seed: s.wrapping_add(i as u64),
                },
                None => Mode::Eval,
            };
            example_loss_and_grads(model, ex, loss, mode)
        })
        .collect();
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for r in results {
        let (l, grads) = r?;
        total += l;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (s, &v) in a.iter_mut().zip(g.data()) {
                *s += v as f64;
            }
        }
    }
    let grads = acc
        .into_iter()
        .zip(model.params.tensors())
        .map(|(a, t)| {
            Tensor::new(t.shape().to_vec(), a.into_iter().map(|v| (v / b) as f32).collect()).expect("same shape")
        })
        .collect();
    Ok((total / b, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(rename = "val_R2")]
    pub val_r2: Option<f64>,
    #[serde(rename = "val_FI")]
    pub val_fi: Option<f64>,
}

/// Loss statistics over a trailing window, for spotting plateaus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauWindow {
    pub end_step: u64,
    pub mean_loss: f64,
    /// Least-squares slope of loss against step over the window.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Train,
    Resume,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: RunKind,
    pub config: TrainConfig,
    pub model: TransformerConfig,
    pub dataset_fingerprint: String,
    pub parent_fingerprint: Option<String>,
    pub context_length: usize,
    pub start_step: u64,
    pub end_step: u64,
    pub skipped_steps: u64,
    pub final_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub best_val_r2: Option<f64>,
    pub wall_clock_s: f64,
    pub windows: Vec<PlateauWindow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub summary: TrainSummary,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.summary)?)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the best validation R² (lowest training loss when there
    /// is no validation split).
    pub best: Checkpoint,
    pub log: TrainLog,
}

/// Sizes the positional table for a dataset's context/query split.
pub fn model_config_for(ds: &Dataset, context_fraction: f64, base: &TransformerConfig) -> Result<TransformerConfig> {
    let m = context_length(ds.n_steps(), context_fraction)?;
    Ok(TransformerConfig {
        n_u: ds.n_u(),
        n_y: ds.n_y(),
        max_context: m,
        max_query: ds.n_steps() - m,
        ..base.clone()
    })
}

fn check_compat(ckpt: &Checkpoint, ds: &Dataset, m: usize) -> Result<()> {
    let c = ckpt.config();
    if c.n_u != ds.n_u() || c.n_y != ds.n_y() {
        return Err(Error::Config(format!(
            "model expects {}+{} channels, dataset has {}+{}",
            c.n_u,
            c.n_y,
            ds.n_u(),
            ds.n_y()
        )));
    }
    if m > c.max_context || ds.n_steps() - m > c.max_query {
        return Err(Error::Config(format!(
            "split {m}+{} exceeds the model's {}+{} positions",
            ds.n_steps() - m,
            c.max_context,
            c.max_query
        )));
    }
    Ok(())
}

/// Trains a fresh model on `ds`.
pub fn train(ds: &Dataset, model: TransformerConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = context_length(ds.n_steps(), cfg.context_fraction)?;
    let model = MetaModel::new(model)?;
    let mut ckpt = Checkpoint::new(model, ds.stats().clone(), m);
    ckpt.optimizer = Some(Adam::new(cfg.adam, ckpt.model.params.tensors()));
    run(ckpt, ds, cfg, RunKind::Train)
}

/// Continues a run from a checkpoint that carries optimizer state.
pub fn resume(ckpt: Checkpoint, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ckpt.optimizer.is_none() {
        return Err(Error::Config("checkpoint has no optimizer state to resume from".into()));
    }
    run(ckpt, ds, cfg, RunKind::Resume)
}

/// Adapts a trained model to `ds` with a fresh optimizer. The parent's
/// normalization statistics are kept so its weights stay meaningful.
pub fn fine_tune(parent: &Checkpoint, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = context_length(ds.n_steps(), cfg.context_fraction)?;
    let mut ckpt = parent.clone();
    ckpt.parent_fingerprint = Some(parent.fingerprint());
    ckpt.step = 0;
    ckpt.train_context = m.max(parent.train_context);
    ckpt.optimizer = Some(Adam::new(cfg.adam, ckpt.model.params.tensors()));
    run(ckpt, ds, cfg, RunKind::FineTune)
}

fn trailing_window(entries: &[LogEntry], end_step: u64) -> PlateauWindow {
    let pts: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.loss.is_finite())
        .map(|e| (e.step as f64, e.loss))
        .collect();
    let n = pts.len().max(1) as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    PlateauWindow {
        end_step,
        mean_loss: my,
        slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
    }
}

fn run(mut ckpt: Checkpoint, ds: &Dataset, cfg: &TrainConfig, kind: RunKind) -> Result<TrainOutcome> {
    let started = Instant::now();
    let m = context_length(ds.n_steps(), cfg.context_fraction)?;
    check_compat(&ckpt, ds, m)?;
    let (train_pos, val_pos) = ds.split_indices();
    if train_pos.len() < cfg.batch_robots {
        return Err(Error::Data(format!(
            "{} training robots cannot fill a batch of {}",
            train_pos.len(),
            cfg.batch_robots
        )));
    }
    let val_ds = (cfg.eval_every > 0 && !val_pos.is_empty())
        .then(|| ds.subset(&val_pos[..val_pos.len().min(cfg.val_robots.max(1))]));
    let stats = ckpt.stats.clone();
    let names = crate::arm::output_channel_names(ds.n_u());
    let end = cfg.halt_at.map_or(cfg.max_steps, |h| h.min(cfg.max_steps));
    let start = ckpt.step;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut entries = Vec::new();
    let mut windows = Vec::new();
    let mut best = ckpt.clone();
    let mut best_step: Option<u64> = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut skipped = 0u64;
    let mut consecutive = 0u32;

    while ckpt.step < end {
        let step = ckpt.step;
        let lr = cfg.learning_rate(step);
        let batch = make_batch(ds, &train_pos, cfg, &stats, &mut batch_stream(cfg.seed, step))?;
        let dropout_seed = (ckpt.config().dropout > 0.0).then(|| cfg.seed ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
        let (loss, mut grads) = batch_loss_and_grads(&ckpt.model, &batch, cfg.loss, dropout_seed)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let applied = if loss.is_finite() {
            let adam = ckpt.optimizer.as_mut().expect("training runs carry an optimizer");
            adam.step(ckpt.model.params.tensors_mut(), &grads, lr)? == StepOutcome::Applied
        } else {
            false
        };
        ckpt.step += 1;
        if applied {
            consecutive = 0;
        } else {
            skipped += 1;
            consecutive += 1;
            if consecutive >= cfg.max_consecutive_skips {
                return Err(Error::NonFinite(format!(
                    "training halted after {consecutive} consecutive non-finite steps at step {step}"
                )));
            }
        }

        let mut entry = LogEntry {
            step,
            loss,
            lr,
            grad_norm,
            val_r2: None,
            val_fi: None,
        };
        let at_eval = cfg.eval_every > 0 && (ckpt.step % cfg.eval_every == 0 || ckpt.step == end);
        if let (true, Some(vds)) = (at_eval, &val_ds) {
            let preds = eval::predict_dataset(&ckpt, vds, m, None)?;
            let report = eval::aggregate_approach_a(&preds, &names)?;
            entry.val_r2 = report.mean_r2;
            entry.val_fi = report.mean_fi;
            if let Some(r2) = report.mean_r2 {
                if r2 > best_score {
                    best_score = r2;
                    best = ckpt.clone();
                    best_step = Some(ckpt.step);
                    if let Some(dir) = &cfg.out_dir {
                        save_checkpoint(&best, &dir.join("best.rmck"))?;
                    }
                }
            }
        } else if val_ds.is_none() && loss.is_finite() && -loss > best_score {
            best_score = -loss;
            best = ckpt.clone();
            best_step = Some(ckpt.step);
        }
        entries.push(entry);
        if ckpt.step % 100 == 0 {
            let from = entries.len().saturating_sub(100);
            windows.push(trailing_window(&entries[from..], ckpt.step));
        }
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && ckpt.step % cfg.checkpoint_every == 0 {
                save_checkpoint(&ckpt, &dir.join("last.rmck"))?;
            }
        }
    }
    if best_step.is_none() {
        best = ckpt.clone();
    }

    let summary = TrainSummary {
        kind,
        config: cfg.clone(),
        model: ckpt.config().clone(),
        dataset_fingerprint: ds.manifest.fingerprint(),
        parent_fingerprint: ckpt.parent_fingerprint.clone(),
        context_length: m,
        start_step: start,
        end_step: ckpt.step,
        skipped_steps: skipped,
        final_loss: entries.last().map(|e| e.loss).filter(|l| l.is_finite()),
        best_step,
        best_val_r2: (val_ds.is_some() && best_step.is_some()).then_some(best_score),
        wall_clock_s: started.elapsed().as_secs_f64(),
        windows,
    };
    let log = TrainLog { entries, summary };
    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(&ckpt, &dir.join("last.rmck"))?;
        if !dir.join("best.rmck").exists() {
            save_checkpoint(&best, &dir.join("best.rmck"))?;
        }
        log.write_csv(&dir.join("train_log.csv"))?;
        log.write_summary(&dir.join("train_summary.json"))?;
    }
    Ok(TrainOutcome { last: ckpt, best, log })
}
