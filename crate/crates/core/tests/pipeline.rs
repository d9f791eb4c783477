//! End-to-end library pipeline: generate, persist, train, evaluate, adapt.

use robometa::datagen::{self, GenerationJob, SignalFamily};
use robometa::eval::{self, Approach, EvalConfig};
use robometa::model::{self, TransformerConfig};
use robometa::train::{self, TrainConfig};
use robometa::ErrorCategory;

fn tiny() -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_heads: 2,
        n_layers_encoder: 1,
        n_layers_decoder: 1,
        d_ff: 32,
        ..Default::default()
    }
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_robots: 4,
        max_steps: steps,
        warmup_steps: 1,
        eval_every: 2,
        val_robots: 4,
        ..Default::default()
    }
}

#[test]
fn dataset_and_checkpoint_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let job = GenerationJob {
        num_robots: 20,
        timesteps: 50,
        ..Default::default()
    };
    let ds = datagen::generate(&job).unwrap();
    let path = dir.path().join("d.rmds");
    datagen::save_dataset(&ds, &path).unwrap();
    let back = datagen::load_dataset(&path).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.stats().fingerprint(), ds.stats().fingerprint());

    let mc = train::model_config_for(&ds, 0.2, &tiny()).unwrap();
    let out = train::train(&ds, mc, &quick(4)).unwrap();
    let ck = dir.path().join("m.rmck");
    model::save_checkpoint(&out.last, &ck).unwrap();
    let loaded = model::load_checkpoint(&ck).unwrap();
    assert_eq!(loaded, out.last);

    let cfg = EvalConfig::default();
    let a = eval::evaluate(&loaded, &back, &cfg).unwrap();
    let b = eval::evaluate(&out.last, &ds, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.n_robots, ds.len());
}

#[test]
fn approaches_agree_on_a_single_robot() {
    let job = GenerationJob {
        num_robots: 8,
        timesteps: 40,
        ..Default::default()
    };
    let ds = datagen::generate(&job).unwrap();
    let mc = train::model_config_for(&ds, 0.2, &tiny()).unwrap();
    let ckpt = train::train(&ds, mc, &quick(2)).unwrap().last;
    let one = ds.subset(&[0]);
    let a = eval::evaluate(&ckpt, &one, &EvalConfig::default()).unwrap();
    let b = eval::evaluate(&ckpt, &one, &EvalConfig { approach: Approach::B, ..Default::default() }).unwrap();
    assert_eq!(a.mean_r2, b.mean_r2);
    assert_eq!(a.mean_fi, b.mean_fi);
}

#[test]
fn fine_tune_on_a_new_family_and_sweep() {
    let base = datagen::generate(&GenerationJob {
        num_robots: 12,
        timesteps: 50,
        ..Default::default()
    })
    .unwrap();
    let spiral = datagen::generate(&GenerationJob {
        num_robots: 8,
        timesteps: 50,
        family: SignalFamily::OscSpiral,
        ..Default::default()
    })
    .unwrap();
    let mc = train::model_config_for(&base, 0.2, &tiny()).unwrap();
    let parent = train::train(&base, mc, &quick(3)).unwrap().last;
    let ft_cfg = TrainConfig {
        peak_lr: train::FINE_TUNE_PEAK_LR,
        ..quick(3)
    };
    let child = train::fine_tune(&parent, &spiral, &ft_cfg).unwrap().last;
    assert_eq!(child.parent_fingerprint.as_deref(), Some(parent.fingerprint().as_str()));
    assert_eq!(child.stats, parent.stats);
    assert_eq!(child.step, 3);

    let cfg = EvalConfig {
        context_fractions: vec![0.1, 0.2],
        horizons: vec![10, 40],
        ..Default::default()
    };
    let cells = eval::sweep_context_horizon(&child, &spiral, &cfg).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        assert_eq!(c.curve.len(), c.horizon * spiral.n_y());
        assert!(c.curve.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn context_longer_than_training_is_rejected() {
    let ds = datagen::generate(&GenerationJob {
        num_robots: 8,
        timesteps: 40,
        ..Default::default()
    })
    .unwrap();
    let mc = train::model_config_for(&ds, 0.2, &tiny()).unwrap();
    let ckpt = train::train(&ds, mc, &quick(1)).unwrap().last;
    let err = eval::evaluate(
        &ckpt,
        &ds,
        &EvalConfig {
            context_fractions: vec![0.5],
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Config);
}
