//! Finite-difference probe of the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{predict, MetaModel, Mode, TransformerConfig};
use crate::error::Result;
use crate::tensor::gradcheck::{CheckResult, FD_STEP};
use crate::tensor::{Tape, Tensor};

pub const END_TO_END_TOLERANCE: f64 = 1e-2;

/// Weights spread over embeddings, attention, feed-forward, norms and head.
pub const PROBE_WEIGHTS: [&str; 10] = [
    "pos",
    "enc.embed.w",
    "enc.0.attn.q.w",
    "enc.0.ff1.w",
    "enc.ln_f.g",
    "dec.embed.w",
    "dec.0.self.v.w",
    "dec.0.cross.k.w",
    "dec.0.ff2.w",
    "head.w",
];

fn mse(model: &MetaModel, u: &Tensor, y: &Tensor, q: &Tensor, target: &Tensor) -> Result<f64> {
    let pred = predict(model, u, y, q)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pred.numel() as f64)
}

/// Compares the tape gradient of an MSE loss through a small model against
/// central differences at one random element of each probe weight.
pub fn end_to_end_gradcheck(seed: u64) -> Result<CheckResult> {
    let cfg = TransformerConfig {
        seed,
        // Larger weights than the default init make perturbation probes sharper.
        init_std: 0.2,
        ..TransformerConfig::tiny(3, 7)
    };
    let model = MetaModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let u = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let y = Tensor::randn(&[6, 7], 1.0, &mut rng);
    let q = Tensor::randn(&[10, 3], 1.0, &mut rng);
    let target = Tensor::randn(&[10, 7], 1.0, &mut rng);

    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, Mode::Eval);
    let out = net.forward(&mut tape, &u, &y, &q)?;
    let vars = net.param_vars().to_vec();
    let t = tape.constant(target.clone());
    let loss = tape.mse(out, t)?;
    tape.backward(loss)?;

    let h = FD_STEP;
    let mut worst = 0.0f64;
    for name in PROBE_WEIGHTS {
        let pi = model.params.position(name).expect("probe weight exists");
        let grad = tape.grad(vars[pi]).expect("parameters are trainable");
        let j = rng.gen_range(0..grad.numel());
        let x = model.params.tensors()[pi].data()[j];
        let mut plus = model.clone();
        plus.params.tensors_mut()[pi].data_mut()[j] = x + h;
        let mut minus = model.clone();
        minus.params.tensors_mut()[pi].data_mut()[j] = x - h;
        let numeric =
            (mse(&plus, &u, &y, &q, &target)? - mse(&minus, &u, &y, &q, &target)?) / ((x + h) as f64 - (x - h) as f64);
        let analytic = grad.data()[j] as f64;
        // Judged against the largest gradient of the same tensor, as in the
        // primitive suite, so near-zero components are not dominated by the
        // rounding of the f32 forward pass.
        let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale).max(1e-4);
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(CheckResult {
        name: "end_to_end_loss".into(),
        max_rel_error: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}
