//! Evaluation protocols: per-robot averaging (approach A), merged coordinates
//! (approach B), context/horizon sweeps, model comparison and depth sweeps.

pub mod metrics;

use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{fit_index, nrmse, r2, rmse, CoordMetrics, FiBand};

use crate::arm::output_channel_names;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{simulate, Checkpoint, TransformerConfig};
use crate::train::{self, context_length, csv_err, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Approach {
    /// Metrics per robot and coordinate, averaged over coordinates, then robots.
    A,
    /// Metrics per coordinate on trajectories concatenated across robots.
    B,
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "per_robot" => Ok(Approach::A),
            "B" | "b" | "merged" => Ok(Approach::B),
            _ => Err(Error::Config(format!("unknown approach '{s}' (expected A or B)"))),
        }
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Approach::A => "A",
            Approach::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test context as a fraction of the trajectory. Single evaluations use
    /// the first entry; sweeps use all of them.
    pub context_fractions: Vec<f64>,
    /// Query lengths in steps; empty means the rest of the trajectory.
    pub horizons: Vec<usize>,
    pub approach: Approach,
    /// Score at most this many robots, chosen with `seed`.
    pub max_robots: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context_fractions: vec![0.2],
            horizons: Vec::new(),
            approach: Approach::A,
            max_robots: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_fractions.is_empty() {
            return Err(Error::Config("at least one context fraction is required".into()));
        }
        if let Some(f) = self.context_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(Error::Config(format!("context fraction {f} outside (0, 1)")));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be positive".into()));
        }
        Ok(())
    }

    /// The robots to score, by position in `ds`.
    pub fn select(&self, ds: &Dataset) -> Vec<usize> {
        match self.max_robots {
            Some(k) if k < ds.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut picked = sample(&mut rng, ds.len(), k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..ds.len()).collect(),
        }
    }
}

/// Ground truth and prediction for one robot's query window, row-major
/// `[steps × n_y]` in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotPrediction {
    pub robot: u32,
    pub n_y: usize,
    pub y: Vec<f64>,
    pub yhat: Vec<f64>,
}

impl RobotPrediction {
    pub fn steps(&self) -> usize {
        self.y.len() / self.n_y
    }

    pub fn channel(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let pick = |v: &[f64]| v.iter().skip(c).step_by(self.n_y).copied().collect();
        (pick(&self.y), pick(&self.yhat))
    }
}

/// Predicts every robot's steps `m..m+horizon` from its first `m` steps.
/// Output order follows the dataset.
pub fn predict_dataset(ckpt: &Checkpoint, ds: &Dataset, m: usize, horizon: Option<usize>) -> Result<Vec<RobotPrediction>> {
    let n = ds.n_steps();
    let h = horizon.unwrap_or(n.saturating_sub(m));
    if m == 0 || h == 0 || m + h > n {
        return Err(Error::Config(format!(
            "context {m} plus horizon {h} does not fit {n}-step trajectories"
        )));
    }
    if ckpt.config().n_u != ds.n_u() || ckpt.config().n_y != ds.n_y() {
        return Err(Error::Dimension {
            what: "dataset output channels",
            expected: ckpt.config().n_y,
            actual: ds.n_y(),
        });
    }
    let fp = ds.stats().fingerprint();
    ds.records
        .par_iter()
        .map(|r| {
            let t = &r.trajectory;
            let (nu, ny) = (t.n_u, t.n_y);
            let sim = simulate(
                ckpt,
                &t.u[..m * nu],
                &t.y[..m * ny],
                &t.u[m * nu..(m + h) * nu],
                Some(&fp),
            )?;
            Ok(RobotPrediction {
                robot: r.params.index,
                n_y: ny,
                y: t.y[m * ny..(m + h) * ny].iter().map(|&v| v as f64).collect(),
                yhat: sim.y,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordReport {
    pub coordinate: String,
    pub metrics: CoordMetrics,
    pub band: Option<FiBand>,
    /// Number of robots (approach A) or merged series (approach B) behind
    /// the values.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub approach: Approach,
    pub n_robots: usize,
    pub coordinates: Vec<CoordReport>,
    pub mean_r2: Option<f64>,
    pub std_r2: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub mean_nrmse: Option<f64>,
    pub mean_fi: Option<f64>,
    pub std_fi: Option<f64>,
    /// Zero-variance cells left out of every average.
    pub sentinel_count: usize,
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (Some(m), Some(var.sqrt()))
}

fn mean_of(v: &[f64]) -> Option<f64> {
    mean_std(v).0
}

fn check_preds(preds: &[RobotPrediction], names: &[String]) -> Result<usize> {
    let first = preds.first().ok_or_else(|| Error::Data("cannot evaluate an empty dataset".into()))?;
    let n_y = first.n_y;
    if names.len() != n_y {
        return Err(Error::Dimension {
            what: "coordinate names",
            expected: n_y,
            actual: names.len(),
        });
    }
    for p in preds {
        if p.n_y != n_y || p.y.len() != p.yhat.len() || p.y.len() % n_y != 0 {
            return Err(Error::Dimension {
                what: "prediction rows",
                expected: n_y,
                actual: p.n_y,
            });
        }
    }
    Ok(n_y)
}

fn coord_report(name: &str, cells: &[CoordMetrics]) -> CoordReport {
    let ok: Vec<&CoordMetrics> = cells.iter().filter(|c| !c.is_sentinel()).collect();
    let pick = |f: fn(&CoordMetrics) -> Option<f64>| mean_of(&ok.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
    let metrics = CoordMetrics {
        r2: pick(|c| c.r2),
        rmse: pick(|c| Some(c.rmse)).unwrap_or_else(|| mean_of(&cells.iter().map(|c| c.rmse).collect::<Vec<_>>()).unwrap_or(0.0)),
        nrmse: pick(|c| c.nrmse),
        fi: pick(|c| c.fi),
    };
    CoordReport {
        coordinate: name.to_string(),
        band: metrics.fi.map(FiBand::of),
        metrics,
        samples: ok.len(),
    }
}

pub fn aggregate_approach_a(preds: &[RobotPrediction], names: &[String]) -> Result<MetricsReport> {
    let n_y = check_preds(preds, names)?;
    let cells: Vec<Vec<CoordMetrics>> = preds
        .iter()
        .map(|p| {
            (0..n_y)
                .map(|c| {
                    let (y, yh) = p.channel(c);
                    CoordMetrics::compute(&y, &yh)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut per_robot: [Vec<f64>; 4] = Default::default();
    let mut sentinels = 0;
    for row in &cells {
        let ok: Vec<&CoordMetrics> = row.iter().filter(|c| !c.is_sentinel()).collect();
        sentinels += row.len() - ok.len();
        if ok.is_empty() {
            continue;
        }
        let avg = |f: fn(&CoordMetrics) -> f64| ok.iter().map(|c| f(c)).sum::<f64>() / ok.len() as f64;
        per_robot[0].push(avg(|c| c.r2.unwrap_or_default()));
        per_robot[1].push(avg(|c| c.rmse));
        per_robot[2].push(avg(|c| c.nrmse.unwrap_or_default()));
        per_robot[3].push(avg(|c| c.fi.unwrap_or_default()));
    }
    let coordinates = (0..n_y)
        .map(|c| coord_report(&names[c], &cells.iter().map(|row| row[c]).collect::<Vec<_>>()))
        .collect();
    let (mean_r2, std_r2) = mean_std(&per_robot[0]);
    let (mean_rmse, std_rmse) = mean_std(&per_robot[1]);
    let (mean_fi, std_fi) = mean_std(&per_robot[3]);
    Ok(MetricsReport {
        approach: Approach::A,
        n_robots: preds.len(),
        coordinates,
        mean_r2,
        std_r2,
        mean_rmse,
        std_rmse,
        mean_nrmse: mean_of(&per_robot[2]),
        mean_fi,
        std_fi,
        sentinel_count: sentinels,
    })
}

pub fn aggregate_approach_b(preds: &[RobotPrediction], names: &[String]) -> Result<MetricsReport> {
    let n_y = check_preds(preds, names)?;
    let mut coordinates = Vec::with_capacity(n_y);
    for c in 0..n_y {
        let (mut y, mut yh) = (Vec::new(), Vec::new());
        for p in preds {
            let (a, b) = p.channel(c);
            y.extend(a);
            yh.extend(b);
        }
        let m = CoordMetrics::compute(&y, &yh)?;
        coordinates.push(CoordReport {
            coordinate: names[c].clone(),
            band: m.band(),
            metrics: m,
            samples: 1,
        });
    }
    let ok: Vec<CoordMetrics> = coordinates.iter().map(|c| c.metrics).filter(|m| !m.is_sentinel()).collect();
    let col = |f: fn(&CoordMetrics) -> Option<f64>| ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>();
    let (mean_r2, std_r2) = mean_std(&col(|m| m.r2));
    let (mean_rmse, std_rmse) = mean_std(&col(|m| Some(m.rmse)));
    let (mean_fi, std_fi) = mean_std(&col(|m| m.fi));
    Ok(MetricsReport {
        approach: Approach::B,
        n_robots: preds.len(),
        sentinel_count: n_y - ok.len(),
        coordinates,
        mean_r2,
        std_r2,
        mean_rmse,
        std_rmse,
        mean_nrmse: mean_of(&col(|m| m.nrmse)),
        mean_fi,
        std_fi,
    })
}

pub fn aggregate(approach: Approach, preds: &[RobotPrediction], names: &[String]) -> Result<MetricsReport> {
    match approach {
        Approach::A => aggregate_approach_a(preds, names),
        Approach::B => aggregate_approach_b(preds, names),
    }
}

fn coordinate_names(ds: &Dataset) -> Vec<String> {
    if ds.n_y() == ds.n_u() + 4 {
        output_channel_names(ds.n_u())
    } else {
        (0..ds.n_y()).map(|c| format!("y{c}")).collect()
    }
}

fn prepared(ckpt: &Checkpoint, ds: &Dataset, cfg: &EvalConfig) -> Result<(Dataset, usize, Option<usize>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let m = context_length(ds.n_steps(), cfg.context_fractions[0])?;
    if m > ckpt.train_context {
        return Err(Error::Unsupported(format!(
            "test context of {m} steps exceeds the training context of {}",
            ckpt.train_context
        )));
    }
    Ok((ds.subset(&cfg.select(ds)), m, cfg.horizons.first().copied()))
}

/// Evaluates with the approach named in `cfg`.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    let (sub, m, h) = prepared(ckpt, ds, cfg)?;
    let preds = predict_dataset(ckpt, &sub, m, h)?;
    aggregate(cfg.approach, &preds, &coordinate_names(ds))
}

pub fn evaluate_approach_a(ckpt: &Checkpoint, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate(ckpt, ds, &EvalConfig { approach: Approach::A, ..cfg.clone() })
}

pub fn evaluate_approach_b(ckpt: &Checkpoint, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate(ckpt, ds, &EvalConfig { approach: Approach::B, ..cfg.clone() })
}

/// Mean absolute error per step and coordinate over robots, row-major
/// `[steps × n_y]`.
pub fn error_curve(preds: &[RobotPrediction]) -> Vec<f64> {
    let Some(first) = preds.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.y.len()];
    for p in preds {
        for ((a, y), yh) in acc.iter_mut().zip(&p.y).zip(&p.yhat) {
            *a += (y - yh).abs();
        }
    }
    let n = preds.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub context_frac: f64,
    pub context: usize,
    pub horizon: usize,
    pub report: MetricsReport,
    /// `[horizon × n_y]` mean absolute error.
    pub curve: Vec<f64>,
}

/// Evaluates every (context fraction, horizon) pair of `cfg`. A context longer
/// than the checkpoint's training context is rejected.
pub fn sweep_context_horizon(ckpt: &Checkpoint, ds: &Dataset, cfg: &EvalConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let sub = ds.subset(&cfg.select(ds));
    let names = coordinate_names(ds);
    let n = ds.n_steps();
    let mut cells = Vec::new();
    for &f in &cfg.context_fractions {
        let m = context_length(n, f)?;
        if m > ckpt.train_context {
            return Err(Error::Unsupported(format!(
                "test context of {m} steps (fraction {f}) exceeds the training context of {}",
                ckpt.train_context
            )));
        }
        let horizons = if cfg.horizons.is_empty() { vec![n - m] } else { cfg.horizons.clone() };
        for h in horizons {
            if m + h > n {
                return Err(Error::Config(format!("horizon {h} exceeds the {} steps after context {m}", n - m)));
            }
            let preds = predict_dataset(ckpt, &sub, m, Some(h))?;
            cells.push(SweepCell {
                context_frac: f,
                context: m,
                horizon: h,
                report: aggregate(cfg.approach, &preds, &names)?,
                curve: error_curve(&preds),
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub zero_shot: MetricsReport,
    pub fine_tuned: MetricsReport,
    pub scratch: MetricsReport,
}

/// Approach-B reports of three checkpoints on the same dataset.
pub fn compare_models(
    zero: &Checkpoint,
    ft: &Checkpoint,
    scratch: &Checkpoint,
    ds: &Dataset,
    cfg: &EvalConfig,
) -> Result<Comparison> {
    for c in [ft, scratch] {
        if c.config().n_u != zero.config().n_u || c.config().n_y != zero.config().n_y {
            return Err(Error::Dimension {
                what: "compared checkpoint outputs",
                expected: zero.config().n_y,
                actual: c.config().n_y,
            });
        }
    }
    Ok(Comparison {
        zero_shot: evaluate_approach_b(zero, ds, cfg)?,
        fine_tuned: evaluate_approach_b(ft, ds, cfg)?,
        scratch: evaluate_approach_b(scratch, ds, cfg)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layers: String,
    pub test_set: String,
    #[serde(rename = "mean_R2")]
    pub mean_r2: Option<f64>,
    #[serde(rename = "std_R2")]
    pub std_r2: Option<f64>,
    #[serde(rename = "mean_RMSE")]
    pub mean_rmse: Option<f64>,
    #[serde(rename = "std_RMSE")]
    pub std_rmse: Option<f64>,
}

/// Trains one model per encoder/decoder depth on `train_ds` and scores each on
/// every named test set with approach A.
pub fn layer_sweep(
    train_ds: &Dataset,
    depths: &[usize],
    base: &TransformerConfig,
    train_cfg: &TrainConfig,
    test_sets: &[(String, Dataset)],
    eval_cfg: &EvalConfig,
) -> Result<Vec<LayerRow>> {
    let mut rows = Vec::new();
    for &d in depths {
        let model = TransformerConfig {
            n_layers_encoder: d,
            n_layers_decoder: d,
            ..train::model_config_for(train_ds, train_cfg.context_fraction, base)?
        };
        let cfg = TrainConfig {
            out_dir: train_cfg.out_dir.as_ref().map(|p| p.join(format!("layers_{d}"))),
            ..train_cfg.clone()
        };
        let outcome = train::train(train_ds, model, &cfg)?;
        for (name, ds) in test_sets {
            let r = evaluate_approach_a(&outcome.best, ds, eval_cfg)?;
            rows.push(LayerRow {
                layers: format!("{d}+{d}"),
                test_set: name.clone(),
                mean_r2: r.mean_r2,
                std_r2: r.std_r2,
                mean_rmse: r.mean_rmse,
                std_rmse: r.std_rmse,
            });
        }
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

pub fn write_coordinates_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["coordinate", "R2", "RMSE", "NRMSE", "FI", "band"]).map_err(csv_err)?;
    for c in &report.coordinates {
        let m = &c.metrics;
        w.write_record([
            c.coordinate.clone(),
            cell(m.r2),
            m.rmse.to_string(),
            cell(m.nrmse),
            cell(m.fi),
            c.band.map(|b| b.label().to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["approach", "mean_R2", "std_R2", "mean_RMSE", "std_RMSE", "sentinel_count"])
        .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.approach.to_string(),
            cell(r.mean_r2),
            cell(r.std_r2),
            cell(r.mean_rmse),
            cell(r.std_rmse),
            r.sentinel_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["context_frac", "horizon", "mean_R2", "mean_FI"]).map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.context_frac.to_string(),
            c.horizon.to_string(),
            cell(c.report.mean_r2),
            cell(c.report.mean_fi),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Tidy per-step error curves: one row per (cell, step) with one absolute
/// error column per coordinate.
pub fn write_curves_csv(cells: &[SweepCell], names: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["context_frac".to_string(), "horizon".into(), "step".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for c in cells {
        for (k, row) in c.curve.chunks(names.len()).enumerate() {
            let mut rec = vec![c.context_frac.to_string(), c.horizon.to_string(), k.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison_csv(cmp: &Comparison, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["coordinate".to_string()];
    for tag in ["zero_shot", "fine_tuned", "scratch"] {
        header.extend([format!("{tag}_R2"), format!("{tag}_FI"), format!("{tag}_band")]);
    }
    w.write_record(&header).map_err(csv_err)?;
    let reports = [&cmp.zero_shot, &cmp.fine_tuned, &cmp.scratch];
    for (i, c) in cmp.zero_shot.coordinates.iter().enumerate() {
        let mut rec = vec![c.coordinate.clone()];
        for r in reports {
            let c = &r.coordinates[i];
            rec.extend([
                cell(c.metrics.r2),
                cell(c.metrics.fi),
                c.band.map(|b| b.label().to_string()).unwrap_or_default(),
            ]);
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_layers_csv(rows: &[LayerRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["layers", "test_set", "mean_R2", "std_R2", "mean_RMSE", "std_RMSE"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.layers.clone(),
            r.test_set.clone(),
            cell(r.mean_r2),
            cell(r.std_r2),
            cell(r.mean_rmse),
            cell(r.std_rmse),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
