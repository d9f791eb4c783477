use std::fs;
use std::path::{Path, PathBuf};

use robometa::datagen::{self, load_dataset, manifest_path, save_dataset, Dataset, GenerationJob, Preset, SignalFamily};
use robometa::eval::{self, Approach, EvalConfig};
use robometa::model::{end_to_end_gradcheck, load_checkpoint, simulate as model_simulate, Checkpoint, TransformerConfig};
use robometa::tensor::gradcheck::primitive_suite;
use robometa::train::{self, context_length, LossKind, TrainConfig};
use robometa::{Error, Result};

use crate::args::*;
use crate::manifest::{beside, required, resolve, Run, DIR_MANIFEST};

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_dataset(path: &Path, run: &mut Run) -> Result<Dataset> {
    run.input(path);
    load_dataset(path).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn read_checkpoint(path: &Path, run: &mut Run) -> Result<Checkpoint> {
    run.input(path);
    load_checkpoint(path).map_err(|e| with_path(e, path))
}

fn warn_stats(ckpt: &Checkpoint, ds: &Dataset) {
    let (own, theirs) = (ckpt.fingerprint(), ds.stats().fingerprint());
    if own != theirs {
        eprintln!("warning: dataset statistics {theirs} differ from the checkpoint's {own}; using the checkpoint's");
    }
}

pub fn generate(flags: GenerateArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let mut job = GenerationJob {
        num_robots: a.robots.unwrap_or(16),
        timesteps: a.steps.unwrap_or(1000),
        family: a.family.as_deref().unwrap_or("multisin").parse::<SignalFamily>()?,
        n_links: a.links.unwrap_or(3),
        ..Default::default()
    };
    job.randomization = job
        .randomization
        .with_preset(a.preset.as_deref().unwrap_or("default").parse::<Preset>()?);
    job.randomization.seed = a.seed.unwrap_or(0);
    let mut run = Run::start("generate", config, Some(job.randomization.seed));
    let ds = datagen::generate(&job)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_dataset(&ds, &out)?;
    run.output(&out);
    run.output(&manifest_path(&out));
    let mut by_violation = serde_json::Map::new();
    for e in &ds.manifest.blacklist {
        let n = by_violation.entry(e.violation.as_str()).or_insert(serde_json::json!(0));
        *n = serde_json::json!(n.as_u64().unwrap_or(0) + 1);
    }
    print_json(&serde_json::json!({
        "dataset": out,
        "kept": ds.manifest.num_kept,
        "blacklisted": ds.manifest.num_blacklisted,
        "blacklist_by_violation": by_violation,
        "fingerprint": ds.stats().fingerprint(),
    }));
    run.finish(&beside(&out))
}

fn loss_of(name: Option<&str>, delta: Option<f32>) -> Result<LossKind> {
    match name.unwrap_or("mse") {
        "mse" => Ok(LossKind::Mse),
        "huber" => Ok(LossKind::Huber {
            delta: delta.unwrap_or(1.0),
        }),
        other => Err(Error::Config(format!("unknown loss '{other}' (expected mse or huber)"))),
    }
}

fn model_base(layers: Option<usize>, d_model: Option<usize>, heads: Option<usize>, d_ff: Option<usize>) -> TransformerConfig {
    let d = TransformerConfig::default();
    TransformerConfig {
        n_layers_encoder: layers.unwrap_or(d.n_layers_encoder),
        n_layers_decoder: layers.unwrap_or(d.n_layers_decoder),
        d_model: d_model.unwrap_or(d.d_model),
        n_heads: heads.unwrap_or(d.n_heads),
        d_ff: d_ff.unwrap_or(d.d_ff),
        ..d
    }
}

pub fn train(flags: TrainArgs, fine_tune: bool) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let data = required(&a.data, "data")?.clone();
    let out = required(&a.out, "out")?.clone();
    if fine_tune && a.from.is_none() {
        return Err(Error::Config("finetune needs --from <checkpoint>".into()));
    }
    if a.resume.is_some() && a.from.is_some() {
        return Err(Error::Config("--resume and --from are mutually exclusive".into()));
    }
    let base = if fine_tune || a.from.is_some() {
        TrainConfig::fine_tune_defaults()
    } else {
        TrainConfig::default()
    };
    let peak = a.lr.unwrap_or(base.peak_lr);
    let seed = a.seed.unwrap_or(0);
    let cfg = TrainConfig {
        batch_robots: a.batch.unwrap_or(base.batch_robots),
        context_fraction: a.context_fraction.unwrap_or(base.context_fraction),
        loss: loss_of(a.loss.as_deref(), a.huber_delta)?,
        warmup_steps: a.warmup.unwrap_or(base.warmup_steps),
        peak_lr: peak,
        min_lr: a.min_lr.unwrap_or(peak / 10.0),
        max_steps: a.steps.unwrap_or(base.max_steps),
        grad_clip: a.clip.unwrap_or(base.grad_clip),
        eval_every: a.eval_every.unwrap_or(base.eval_every),
        checkpoint_every: a.checkpoint_every.unwrap_or(base.checkpoint_every),
        val_robots: a.val_robots.unwrap_or(base.val_robots),
        seed,
        halt_at: a.halt_at,
        fine_tune_from: a.from.clone(),
        out_dir: Some(out.clone()),
        ..base
    };
    let subcommand = if fine_tune { "finetune" } else { "train" };
    let mut run = Run::start(subcommand, config, Some(seed));
    let ds = read_dataset(&data, &mut run)?;
    ensure_dir(&out)?;
    let outcome = if let Some(parent) = &a.from {
        let parent = read_checkpoint(parent, &mut run)?;
        train::fine_tune(&parent, &ds, &cfg)?
    } else if let Some(path) = &a.resume {
        let ckpt = read_checkpoint(path, &mut run)?;
        warn_stats(&ckpt, &ds);
        train::resume(ckpt, &ds, &cfg)?
    } else {
        let model = TransformerConfig {
            seed,
            dropout: a.dropout.unwrap_or(0.0),
            ..model_base(a.layers, a.d_model, a.heads, a.d_ff)
        };
        let model = train::model_config_for(&ds, cfg.context_fraction, &model)?;
        train::train(&ds, model, &cfg)?
    };
    for f in ["best.rmck", "last.rmck", "train_log.csv", "train_summary.json"] {
        run.output(&out.join(f));
    }
    let s = &outcome.log.summary;
    print_json(&serde_json::json!({
        "out": out,
        "kind": s.kind,
        "steps": s.end_step,
        "final_loss": s.final_loss,
        "best_step": s.best_step,
        "best_val_R2": s.best_val_r2,
        "skipped_steps": s.skipped_steps,
        "wall_clock_s": s.wall_clock_s,
    }));
    run.finish(&out.join(DIR_MANIFEST))
}

fn eval_config(
    fractions: Vec<f64>,
    horizons: Vec<usize>,
    approach: Option<&str>,
    max_robots: Option<usize>,
    seed: Option<u64>,
) -> Result<EvalConfig> {
    Ok(EvalConfig {
        context_fractions: fractions,
        horizons,
        approach: approach.unwrap_or("A").parse::<Approach>()?,
        max_robots,
        seed: seed.unwrap_or(0),
    })
}

pub fn evaluate(flags: EvaluateArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let cfg = eval_config(
        vec![a.context_fraction.unwrap_or(0.2)],
        a.horizon.into_iter().collect(),
        a.approach.as_deref(),
        a.max_robots,
        a.seed,
    )?;
    let mut run = Run::start("evaluate", config, Some(cfg.seed));
    let ckpt = read_checkpoint(required(&a.checkpoint, "checkpoint")?, &mut run)?;
    let ds = read_dataset(required(&a.data, "data")?, &mut run)?;
    warn_stats(&ckpt, &ds);
    let report = eval::evaluate(&ckpt, &ds, &cfg)?;
    ensure_dir(&out)?;
    let (coords, agg, json) = (out.join("coordinates.csv"), out.join("aggregate.csv"), out.join("report.json"));
    eval::write_coordinates_csv(&report, &coords)?;
    eval::write_aggregate_csv(std::slice::from_ref(&report), &agg)?;
    fs::write(&json, serde_json::to_vec_pretty(&report)?)?;
    for p in [&coords, &agg, &json] {
        run.output(p);
    }
    print_json(&serde_json::json!({
        "approach": report.approach,
        "robots": report.n_robots,
        "mean_R2": report.mean_r2,
        "std_R2": report.std_r2,
        "mean_RMSE": report.mean_rmse,
        "mean_FI": report.mean_fi,
        "sentinel_count": report.sentinel_count,
    }));
    run.finish(&out.join(DIR_MANIFEST))
}

pub fn sweep_context_horizon(flags: SweepContextArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let cfg = eval_config(
        a.fractions.clone().unwrap_or_else(|| vec![0.05, 0.1, 0.2]),
        a.horizons.clone().unwrap_or_default(),
        a.approach.as_deref(),
        a.max_robots,
        a.seed,
    )?;
    let mut run = Run::start("sweep context-horizon", config, Some(cfg.seed));
    let ckpt = read_checkpoint(required(&a.checkpoint, "checkpoint")?, &mut run)?;
    let ds = read_dataset(required(&a.data, "data")?, &mut run)?;
    warn_stats(&ckpt, &ds);
    let cells = eval::sweep_context_horizon(&ckpt, &ds, &cfg)?;
    ensure_dir(&out)?;
    let names = robometa::arm::output_channel_names(ds.n_u());
    let (table, curves) = (out.join("sweep.csv"), out.join("curves.csv"));
    eval::write_sweep_csv(&cells, &table)?;
    eval::write_curves_csv(&cells, &names, &curves)?;
    run.output(&table);
    run.output(&curves);
    for c in &cells {
        print_json(&serde_json::json!({
            "context_frac": c.context_frac,
            "horizon": c.horizon,
            "mean_R2": c.report.mean_r2,
            "mean_FI": c.report.mean_fi,
        }));
    }
    run.finish(&out.join(DIR_MANIFEST))
}

fn parse_test_set(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(Error::Config(format!("--test expects name=path, got '{spec}'"))),
    }
}

pub fn sweep_layers(flags: SweepLayersArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let seed = a.seed.unwrap_or(0);
    let mut run = Run::start("sweep layers", config, Some(seed));
    let ds = read_dataset(required(&a.data, "data")?, &mut run)?;
    let mut tests = Vec::new();
    match &a.test {
        Some(specs) if !specs.is_empty() => {
            for s in specs {
                let (name, path) = parse_test_set(s)?;
                tests.push((name, read_dataset(&path, &mut run)?));
            }
        }
        _ => {
            let (_, val) = ds.split_indices();
            if val.is_empty() {
                return Err(Error::Data("dataset has no validation robots; pass --test name=path".into()));
            }
            tests.push(("val".to_string(), ds.subset(&val)));
        }
    }
    let base = TrainConfig::default();
    let peak = a.lr.unwrap_or(base.peak_lr);
    let train_cfg = TrainConfig {
        batch_robots: a.batch.unwrap_or(base.batch_robots),
        context_fraction: a.context_fraction.unwrap_or(base.context_fraction),
        warmup_steps: a.warmup.unwrap_or(base.warmup_steps),
        peak_lr: peak,
        min_lr: peak / 10.0,
        max_steps: a.steps.unwrap_or(base.max_steps),
        eval_every: a.eval_every.unwrap_or(base.eval_every),
        seed,
        out_dir: Some(out.clone()),
        ..base
    };
    let model = TransformerConfig {
        seed,
        ..model_base(None, a.d_model, a.heads, a.d_ff)
    };
    let eval_cfg = EvalConfig {
        context_fractions: vec![train_cfg.context_fraction],
        max_robots: a.max_robots,
        seed,
        ..Default::default()
    };
    let depths = a.layers.clone().unwrap_or_else(|| vec![2, 4, 6]);
    ensure_dir(&out)?;
    let rows = eval::layer_sweep(&ds, &depths, &model, &train_cfg, &tests, &eval_cfg)?;
    let table = out.join("layers.csv");
    eval::write_layers_csv(&rows, &table)?;
    run.output(&table);
    for r in &rows {
        print_json(&serde_json::to_value(r)?);
    }
    run.finish(&out.join(DIR_MANIFEST))
}

pub fn compare(flags: CompareArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let cfg = eval_config(vec![a.context_fraction.unwrap_or(0.2)], Vec::new(), Some("B"), a.max_robots, a.seed)?;
    let mut run = Run::start("compare", config, Some(cfg.seed));
    let zero = read_checkpoint(required(&a.zero, "zero")?, &mut run)?;
    let ft = read_checkpoint(required(&a.ft, "ft")?, &mut run)?;
    let scratch = read_checkpoint(required(&a.scratch, "scratch")?, &mut run)?;
    let ds = read_dataset(required(&a.data, "data")?, &mut run)?;
    let cmp = eval::compare_models(&zero, &ft, &scratch, &ds, &cfg)?;
    ensure_dir(&out)?;
    let (table, json) = (out.join("comparison.csv"), out.join("comparison.json"));
    eval::write_comparison_csv(&cmp, &table)?;
    fs::write(&json, serde_json::to_vec_pretty(&cmp)?)?;
    run.output(&table);
    run.output(&json);
    print_json(&serde_json::json!({
        "zero_shot_mean_FI": cmp.zero_shot.mean_fi,
        "fine_tuned_mean_FI": cmp.fine_tuned.mean_fi,
        "scratch_mean_FI": cmp.scratch.mean_fi,
    }));
    run.finish(&out.join(DIR_MANIFEST))
}

pub fn gradcheck(flags: GradcheckArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let seed = a.seed.unwrap_or(5);
    let run = Run::start("gradcheck", config, Some(seed));
    let mut results = primitive_suite()?;
    results.push(end_to_end_gradcheck(seed)?);
    for r in &results {
        print_json(&serde_json::json!({
            "name": r.name,
            "max_rel_error": r.max_rel_error,
            "tolerance": r.tolerance,
            "passed": r.passed(),
        }));
    }
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_vec_pretty(&results)?)?;
        let mut run = run;
        run.output(path);
        run.finish(&beside(path))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn simulate(flags: SimulateArgs) -> Result<()> {
    let (a, config) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let mut run = Run::start("simulate", config, None);
    let ds = read_dataset(required(&a.data, "data")?, &mut run)?;
    let record = match a.robot {
        Some(i) => ds
            .records
            .iter()
            .find(|r| r.params.index == i)
            .ok_or_else(|| Error::Data(format!("robot {i} is not in the dataset")))?,
        None => ds.records.first().ok_or_else(|| Error::Data("dataset is empty".into()))?,
    };
    let t = &record.trajectory;
    let n = t.len();
    let prediction = match &a.checkpoint {
        Some(path) => {
            let ckpt = read_checkpoint(path, &mut run)?;
            let m = context_length(n, a.context_fraction.unwrap_or(0.2))?;
            let sim = model_simulate(
                &ckpt,
                &t.u[..m * t.n_u],
                &t.y[..m * t.n_y],
                &t.u[m * t.n_u..],
                Some(&ds.stats().fingerprint()),
            )?;
            if let Some(w) = &sim.warning {
                eprintln!("warning: {w}");
            }
            Some((m, sim.y))
        }
        None => None,
    };
    let names = robometa::arm::output_channel_names(t.n_u);
    let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Data(format!("csv: {e}")))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..t.n_u).map(|j| format!("u{j}")));
    header.extend(names.iter().cloned());
    if prediction.is_some() {
        header.extend(names.iter().map(|c| format!("pred_{c}")));
    }
    w.write_record(&header).map_err(|e| Error::Data(format!("csv: {e}")))?;
    for k in 0..n {
        let mut rec = vec![(k as f64 * t.dt).to_string()];
        rec.extend(t.u_row(k).iter().map(|v| v.to_string()));
        rec.extend(t.y_row(k).iter().map(|v| v.to_string()));
        if let Some((m, y)) = &prediction {
            if k < *m {
                rec.extend(std::iter::repeat(String::new()).take(t.n_y));
            } else {
                rec.extend(y[(k - m) * t.n_y..(k - m + 1) * t.n_y].iter().map(|v| v.to_string()));
            }
        }
        w.write_record(&rec).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush()?;
    run.output(&out);
    print_json(&serde_json::json!({ "robot": record.params.index, "rows": n, "out": out }));
    run.finish(&beside(&out))
}
