use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; parameters and moments were left alone.
    SkippedNonFinite,
}

/// Adam with bias correction. Moments are stored in `f32` so a saved state
/// resumes bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i} is {:?} but its grad is {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let mn = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let vn = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *pi = (*pi as f64 - update) as f32;
            }
        }
        Ok(StepOutcome::Applied)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        // The small margin absorbs f32 rounding of the rescaled entries.
        let s = (max_norm / norm * (1.0 - 1e-6)) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = scalar_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let out = adam.step(&mut params, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(out, StepOutcome::Applied);
        assert_eq!(params[0].data(), [0.7]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::full(&[1], 1.0)], 0.1).unwrap();
        // m̂ = v̂ = 1 at t = 1, so the step is lr / (1 + ε).
        let want = -0.1 / (1.0 + 1e-8);
        assert!((params[0].data()[0] as f64 - want).abs() < 1e-8);
    }

    #[test]
    fn parameters_update_independently() {
        let mut joint = vec![Tensor::full(&[2], 1.0), Tensor::full(&[3], -1.0)];
        let grads = vec![Tensor::new(vec![2], vec![0.3, -2.0]).unwrap(), Tensor::full(&[3], 0.5)];
        let mut adam = Adam::new(AdamConfig::default(), &joint);
        adam.step(&mut joint, &grads, 0.01).unwrap();
        for i in 0..2 {
            let mut alone = vec![if i == 0 { Tensor::full(&[2], 1.0) } else { Tensor::full(&[3], -1.0) }];
            let mut solo = Adam::new(AdamConfig::default(), &alone);
            solo.step(&mut alone, &grads[i..i + 1], 0.01).unwrap();
            assert_eq!(alone[0], joint[i]);
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut params = scalar_param(0.5);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let out = adam.step(&mut params, &[Tensor::full(&[1], f32::NAN)], 0.1).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!((params[0].data()[0], adam.step), (0.5, 0));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = vec![Tensor::full(&[10], 3.0), Tensor::full(&[4], -7.0)];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!(before > 1.0);
        assert!(global_norm(&grads) <= 1.0);
        let mut small = vec![Tensor::full(&[2], 0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), [0.1, 0.1]);
    }
}
