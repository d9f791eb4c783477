use super::*;
use crate::datagen::NormalizationStats;
use crate::tensor::{Adam, AdamConfig};

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn tiny() -> MetaModel {
    let mut cfg = TransformerConfig::tiny(3, 7);
    cfg.seed = 5;
    // Larger weights than the default init make perturbation probes sharper.
    cfg.init_std = 0.2;
    MetaModel::new(cfg).unwrap()
}

fn ctx(m: usize, seed: u64) -> (Tensor, Tensor) {
    (rand_t(&[m, 3], seed), rand_t(&[m, 7], seed + 1))
}

fn encode_only(model: &MetaModel, emb: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, Mode::Eval);
    let e = tape.constant(emb.clone());
    let z = net.encode(&mut tape, e).unwrap();
    tape.value(z).clone()
}

#[test]
fn parameter_count_follows_config() {
    let cfg = TransformerConfig::tiny(3, 7);
    let model = MetaModel::new(cfg.clone()).unwrap();
    let total: usize = model.params.tensors().iter().map(Tensor::numel).sum();
    assert_eq!(total, cfg.param_count());
    assert_eq!(MetaModel::new(cfg.clone()).unwrap().config.param_count(), total);
    // Per-layer count for d=16, f=32: encoder 2·32 + 4·272 + 16·32+32 + 32·16+16 = 2208.
    let (d, f) = (16, 32);
    let enc_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
    let mut deeper = cfg.clone();
    deeper.n_layers_encoder += 1;
    assert_eq!(deeper.param_count() - cfg.param_count(), enc_layer);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = TransformerConfig::tiny(3, 7);
    cfg.n_heads = 3;
    assert!(matches!(MetaModel::new(cfg), Err(Error::Config(_))));
    let mut cfg = TransformerConfig::tiny(3, 7);
    cfg.dropout = 1.0;
    assert!(MetaModel::new(cfg).is_err());
}

#[test]
fn zero_weights_embed_to_zero() {
    let mut model = tiny();
    for name in ["enc.embed.w", "enc.embed.b", "pos"] {
        let t = model.params.get_mut(name).unwrap();
        t.data_mut().fill(0.0);
    }
    let (u, y) = ctx(5, 1);
    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, Mode::Eval);
    let e = net.embed_context(&mut tape, &u, &y).unwrap();
    assert_eq!(tape.shape(e), [5, 16]);
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn positions_distinguish_identical_steps() {
    let model = tiny();
    let u = Tensor::full(&[2, 3], 0.4);
    let y = Tensor::full(&[2, 7], -0.2);
    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, Mode::Eval);
    let e = net.embed_context(&mut tape, &u, &y).unwrap();
    let rows: Vec<&[f32]> = tape.value(e).data().chunks(16).collect();
    assert_ne!(rows[0], rows[1]);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = tiny();
    let emb = rand_t(&[6, 16], 3);
    let perm = [4, 0, 5, 2, 1, 3];
    let permuted: Vec<f32> = perm.iter().flat_map(|&i| emb.data()[i * 16..(i + 1) * 16].to_vec()).collect();
    let z = encode_only(&model, &emb);
    let zp = encode_only(&model, &Tensor::new(vec![6, 16], permuted).unwrap());
    for (row, &src) in perm.iter().enumerate() {
        for c in 0..16 {
            let (a, b) = (zp.data()[row * 16 + c], z.data()[src * 16 + c]);
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn encoder_has_no_causal_restriction() {
    let model = tiny();
    let emb = rand_t(&[5, 16], 4);
    let mut later = emb.clone();
    later.data_mut()[4 * 16 + 3] += 0.5;
    let (a, b) = (encode_only(&model, &emb), encode_only(&model, &later));
    assert_ne!(&a.data()[..16], &b.data()[..16]);
}

#[test]
fn single_step_context_skips_attention_mixing() {
    let model = tiny();
    let emb = rand_t(&[1, 16], 6);
    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, Mode::Eval);
    let e = tape.constant(emb.clone());
    let z = net.encode(&mut tape, e).unwrap();
    // A lone token attends only to itself, so attention reduces to the value
    // and output projections.
    let mut x = tape.constant(emb);
    for l in 0..model.config.n_layers_encoder {
        let h = net.norm(&mut tape, x, &format!("enc.{l}.ln1")).unwrap();
        let v = net.linear(&mut tape, h, &format!("enc.{l}.attn.v")).unwrap();
        let a = net.linear(&mut tape, v, &format!("enc.{l}.attn.o")).unwrap();
        x = tape.add(x, a).unwrap();
        let h = net.norm(&mut tape, x, &format!("enc.{l}.ln2")).unwrap();
        let f = net.feed_forward(&mut tape, h, &format!("enc.{l}")).unwrap();
        x = tape.add(x, f).unwrap();
    }
    let want = net.norm(&mut tape, x, "enc.ln_f").unwrap();
    for (a, b) in tape.value(z).data().iter().zip(tape.value(want).data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn decoder_is_causal_bit_exactly() {
    let model = tiny();
    let (u, y) = ctx(8, 10);
    let q = rand_t(&[20, 3], 12);
    let base = predict(&model, &u, &y, &q).unwrap();
    for k in [0, 7, 19] {
        let mut probe = q.clone();
        probe.data_mut()[k * 3 + 1] += 1.0;
        let out = predict(&model, &u, &y, &probe).unwrap();
        assert_eq!(&out.data()[..k * 7], &base.data()[..k * 7], "rows before {k} moved");
        assert_ne!(&out.data()[k * 7..(k + 1) * 7], &base.data()[k * 7..(k + 1) * 7]);
    }
}

#[test]
fn decoder_prefix_is_consistent() {
    let model = tiny();
    let (u, y) = ctx(8, 20);
    let q = rand_t(&[30, 3], 22);
    let full = predict(&model, &u, &y, &q).unwrap();
    for kp in [1, 13, 29] {
        let head = Tensor::new(vec![kp, 3], q.data()[..kp * 3].to_vec()).unwrap();
        let part = predict(&model, &u, &y, &head).unwrap();
        assert_eq!(part.data(), &full.data()[..kp * 7]);
    }
}

#[test]
fn zero_head_emits_its_bias() {
    let mut model = tiny();
    model.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let bias: Vec<f32> = (0..7).map(|i| i as f32 * 0.5 - 1.0).collect();
    model.params.get_mut("head.b").unwrap().data_mut().copy_from_slice(&bias);
    let (u, y) = ctx(4, 30);
    let out = predict(&model, &u, &y, &rand_t(&[6, 3], 31)).unwrap();
    for row in out.data().chunks(7) {
        assert_eq!(row, bias.as_slice());
    }
}

#[test]
fn oversized_inputs_are_unsupported() {
    let model = tiny();
    let (u, y) = ctx(17, 40);
    assert!(matches!(
        predict(&model, &u, &y, &rand_t(&[2, 3], 41)),
        Err(Error::Unsupported(_))
    ));
    let (u, y) = ctx(4, 40);
    assert!(matches!(
        predict(&model, &u, &y, &rand_t(&[49, 3], 41)),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn dropout_only_acts_in_training() {
    let mut cfg = TransformerConfig::tiny(3, 7);
    cfg.dropout = 0.2;
    let model = MetaModel::new(cfg).unwrap();
    let (u, y) = ctx(4, 50);
    let q = rand_t(&[5, 3], 51);
    let run = |mode| {
        let mut tape = Tape::new();
        let mut net = model.bind(&mut tape, mode);
        let o = net.forward(&mut tape, &u, &y, &q).unwrap();
        tape.value(o).clone()
    };
    assert_eq!(run(Mode::Eval), predict(&model, &u, &y, &q).unwrap());
    assert_eq!(run(Mode::Train { seed: 1 }), run(Mode::Train { seed: 1 }));
    assert_ne!(run(Mode::Train { seed: 1 }), run(Mode::Eval));
}

/// Loss in f64 from the f32 prediction, for finite differences.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in [5, 6] {
        let r = end_to_end_gradcheck(seed).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

fn checkpoint_with_adam() -> Checkpoint {
    let model = tiny();
    let stats = NormalizationStats {
        u_mean: vec![0.1, -2.0, 3.5],
        u_std: vec![10.0, 4.0, 1.0 / 3.0],
        y_mean: vec![0.2; 7],
        y_std: vec![0.7; 7],
    };
    let mut ck = Checkpoint::new(model, stats, 12);
    let mut adam = Adam::new(AdamConfig::default(), ck.model.params.tensors());
    let grads: Vec<Tensor> = ck
        .model
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| rand_t(t.shape(), 100 + i as u64))
        .collect();
    let mut params = ck.model.params.tensors().to_vec();
    adam.step(&mut params, &grads, 1e-3).unwrap();
    ck.model.params.tensors_mut().clone_from_slice(&params);
    ck.optimizer = Some(adam);
    ck.step = 1;
    ck.parent_fingerprint = Some("abc".into());
    ck
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rmck");
    for ck in [checkpoint_with_adam(), Checkpoint::new(tiny(), NormalizationStats::identity(3, 7), 16)] {
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
    }
}

#[test]
fn corrupt_checkpoints_fail_distinctly() {
    let bytes = checkpoint_with_adam().encode().unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::VersionMismatch { .. })));
    let mut bad = bytes.clone();
    let mid = bytes.len() / 2;
    bad[mid] ^= 1;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checksum { .. })));
    assert!(Checkpoint::decode(&bytes[..bytes.len() / 3]).is_err());
}

#[test]
fn simulate_contract() {
    let ck = Checkpoint::new(tiny(), NormalizationStats::identity(3, 7), 10);
    let (u, y) = ctx(10, 70);
    let q = rand_t(&[25, 3], 71);
    let sim = simulate(&ck, u.data(), y.data(), q.data(), None).unwrap();
    assert_eq!((sim.steps, sim.y.len()), (25, 25 * 7));
    assert!(sim.y.iter().all(|v| v.is_finite()));
    assert!(sim.warning.is_none());

    // Any shorter context is accepted; a longer one is not.
    for m in [1, 4, 9] {
        simulate(&ck, &u.data()[..m * 3], &y.data()[..m * 7], q.data(), None).unwrap();
    }
    let (u11, y11) = ctx(11, 72);
    assert!(matches!(
        simulate(&ck, u11.data(), y11.data(), q.data(), None),
        Err(Error::Unsupported(_))
    ));

    let warned = simulate(&ck, u.data(), y.data(), q.data(), Some("not-the-same")).unwrap();
    assert!(warned.warning.is_some());
    assert_eq!(warned.y, sim.y);
    let fp = ck.fingerprint();
    assert!(simulate(&ck, u.data(), y.data(), q.data(), Some(&fp)).unwrap().warning.is_none());
}

#[test]
fn simulate_denormalizes_with_checkpoint_stats() {
    let mut model = tiny();
    model.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    model.params.get_mut("head.b").unwrap().data_mut().fill(1.0);
    let mut stats = NormalizationStats::identity(3, 7);
    stats.y_mean = vec![2.0; 7];
    stats.y_std = vec![0.5; 7];
    let ck = Checkpoint::new(model, stats, 8);
    let (u, y) = ctx(3, 80);
    let sim = simulate(&ck, u.data(), y.data(), &[0.0; 6], None).unwrap();
    assert!(sim.y.iter().all(|&v| v == 2.5));
}
