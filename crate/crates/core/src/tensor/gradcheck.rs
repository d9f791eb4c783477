//! Central finite-difference checks of reverse-mode gradients.
//!
//! The scalar being differentiated is `Σ w ⊙ f(inputs)` for fixed random
//! weights `w`, which exercises every output element. Error for an input is
//! `max |analytic − numeric|` divided by the largest gradient magnitude of that
//! input (floored), so tiny components are judged against the tensor's scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f32 = 1e-3;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-3;
const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

fn weighted_output<F>(f: &F, inputs: &[Tensor], w: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(w.data())
        .map(|(&y, &c)| y as f64 * c as f64)
        .sum())
}

/// Compares the tape's gradients of `f` against central differences with step
/// `h` for every element of every input.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], h: f32, tolerance: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let w = Tensor::uniform(tape.shape(out), 1.0, &mut rng);
    tape.backward_with(out, w.clone())?;

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("inputs are trainable");
        let mut numeric = Vec::with_capacity(analytic.numel());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + h, x - h);
            probe[i].data_mut()[j] = xp;
            let fp = weighted_output(&f, &probe, &w)?;
            probe[i].data_mut()[j] = xm;
            let fm = weighted_output(&f, &probe, &w)?;
            probe[i].data_mut()[j] = x;
            numeric.push((fp - fm) / (xp as f64 - xm as f64));
        }
        let scale = analytic
            .data()
            .iter()
            .map(|&a| (a as f64).abs())
            .chain(numeric.iter().map(|n| n.abs()))
            .fold(SCALE_FLOOR, f64::max);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, n)| (a as f64 - n).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err / scale);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

/// Runs the finite-difference check for every primitive on small random inputs.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let (h, tol) = (FD_STEP, PRIMITIVE_TOLERANCE);
    let mut out = Vec::new();

    out.push(check_fn("matmul", &[r(&[3, 4]), r(&[4, 2])], h, tol, |t, v| t.matmul(v[0], v[1]))?);
    out.push(check_fn("matmul_batched", &[r(&[2, 3, 4]), r(&[2, 4, 2])], h, tol, |t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(check_fn("matmul_shared", &[r(&[2, 3, 4]), r(&[4, 2])], h, tol, |t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(check_fn("add", &[r(&[3, 4]), r(&[3, 4])], h, tol, |t, v| t.add(v[0], v[1]))?);
    out.push(check_fn("add_bias", &[r(&[3, 4]), r(&[4])], h, tol, |t, v| t.add_bias(v[0], v[1]))?);
    out.push(check_fn("sub", &[r(&[3, 4]), r(&[3, 4])], h, tol, |t, v| t.sub(v[0], v[1]))?);
    out.push(check_fn("mul", &[r(&[3, 4]), r(&[3, 4])], h, tol, |t, v| t.mul(v[0], v[1]))?);
    out.push(check_fn("scale", &[r(&[3, 4])], h, tol, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(check_fn("transpose_last_two", &[r(&[2, 3, 4])], h, tol, |t, v| {
        t.transpose_last_two(v[0])
    })?);
    out.push(check_fn("reshape", &[r(&[2, 6])], h, tol, |t, v| t.reshape(v[0], &[3, 4]))?);
    out.push(check_fn("concat_last_dim", &[r(&[3, 2]), r(&[3, 3]), r(&[3, 1])], h, tol, |t, v| {
        t.concat_last_dim(v)
    })?);
    out.push(check_fn("slice_rows", &[r(&[5, 3])], h, tol, |t, v| t.slice(v[0], 0, 1, 4))?);
    out.push(check_fn("slice_cols", &[r(&[2, 3, 5])], h, tol, |t, v| t.slice(v[0], 2, 2, 5))?);
    out.push(check_fn("softmax_last_dim", &[r(&[3, 5])], h, tol, |t, v| t.softmax_last_dim(v[0]))?);
    out.push(check_fn("layer_norm", &[r(&[3, 6]), r(&[6]), r(&[6])], h, tol, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?);
    out.push(check_fn("gelu", &[r(&[3, 5])], h, tol, |t, v| Ok(t.gelu(v[0])))?);
    out.push(check_fn("dropout", &[r(&[4, 5])], h, tol, |t, v| t.dropout(v[0], 0.3, true, 11))?);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
    out.push(check_fn("masked_fill", &[r(&[3, 4])], h, tol, |t, v| t.masked_fill(v[0], &mask, 0.5))?);
    let causal: Vec<bool> = (0..16).map(|i| i % 4 > i / 4).collect();
    out.push(check_fn("masked_softmax", &[r(&[4, 4])], h, tol, |t, v| {
        let filled = t.masked_fill(v[0], &causal, f32::NEG_INFINITY)?;
        t.softmax_last_dim(filled)
    })?);
    out.push(check_fn("linear", &[r(&[3, 4]), r(&[4, 2]), r(&[2])], h, tol, |t, v| {
        t.linear(v[0], v[1], v[2])
    })?);
    out.push(check_fn("sum", &[r(&[3, 4])], h, tol, |t, v| Ok(t.sum(v[0])))?);
    out.push(check_fn("mean", &[r(&[3, 4])], h, tol, |t, v| Ok(t.mean(v[0])))?);
    out.push(check_fn("mse", &[r(&[3, 4]), r(&[3, 4])], h, tol, |t, v| t.mse(v[0], v[1]))?);
    let big = Tensor::new(
        vec![2, 3],
        vec![2.5, -0.3, 0.6, -2.2, 0.1, 3.1],
    )?;
    out.push(check_fn("huber", &[big, Tensor::zeros(&[2, 3])], h, tol, |t, v| {
        t.huber(v[0], v[1], 1.0)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let results = primitive_suite().unwrap();
        assert!(results.len() >= 20);
        for r in &results {
            assert!(r.passed(), "{} relative error {:.3e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn product_sum_matches_finite_differences() {
        let a = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.5, 0.4, -0.8, 0.9]).unwrap();
        let r = check_fn("sum(A*B)", &[a, b], FD_STEP, PRIMITIVE_TOLERANCE, |t, v| {
            let p = t.mul(v[0], v[1])?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn broken_rule_is_caught() {
        // A "gradient" for x ↦ x² reported through a detached path must fail.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_fn("detached", &[x], FD_STEP, PRIMITIVE_TOLERANCE, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            t.mul(v[0], c)
        })
        .unwrap();
        assert!(!r.passed());
    }
}
