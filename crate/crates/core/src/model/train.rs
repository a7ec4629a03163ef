//! Loss, gradients, Adam and the training loop.

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::swin::build_graph;
use super::ModelParams;
use crate::dataset::PatchSample;
use crate::error::{Error, Result};
use crate::rng::{keyed_prng, permutation};

const SHUFFLE_STREAM: u64 = 0x5EF1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, epochs: 30, batch: 1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// Bias-corrected update of one array at step `t` (1-based).
    pub fn update(&self, w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], t: u64, lr: f64) {
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..w.len() {
            let gi = g[i] as f64;
            let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
            let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            w[i] = (w[i] as f64 - lr * (mi / c1) / ((vi / c2).sqrt() + self.eps)) as f32;
        }
    }
}

/// One Adam step over every array; increments the step counter.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f32>], lr: f64) -> Result<()> {
    if grads.len() != params.values.len() || grads.iter().zip(&params.values).any(|(g, v)| g.len() != v.len()) {
        return Err(Error::Shape("gradients do not match the parameter layout".into()));
    }
    params.step += 1;
    let adam = Adam::default();
    for (k, g) in grads.iter().enumerate() {
        adam.update(&mut params.values[k], &mut params.m[k], &mut params.v[k], g, params.step, lr);
    }
    Ok(())
}

fn check_sample(params: &ModelParams, s: &PatchSample) -> Result<()> {
    let cfg = &params.config;
    if s.channels != cfg.in_channels {
        return Err(Error::Shape(format!("model expects {} channels, patch has {}", cfg.in_channels, s.channels)));
    }
    if let Some(&bad) = s.labels.iter().find(|&&l| l as usize >= cfg.n_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{}", cfg.n_classes - 1)));
    }
    Ok(())
}

fn sample_loss_grad<T: Float, V: Copy + Into<f64>>(
    params: &ModelParams,
    values: &[Vec<V>],
    s: &PatchSample,
) -> Result<(f64, Vec<Vec<T>>)> {
    check_sample(params, s)?;
    let (mut t, vars, logits) = build_graph::<T, V>(params, values, &s.features, s.size, s.size)?;
    let loss = t.cross_entropy(logits, &s.labels);
    let value = t.value(loss)[0].to_f64().unwrap();
    let mut g = t.backward(loss);
    let grads = vars
        .iter()
        .zip(&params.values)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![T::zero(); p.len()]))
        .collect();
    Ok((value, grads))
}

/// Mean per-pixel cross-entropy over the batch (class 0 included) and its
/// exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &[PatchSample]) -> Result<(f64, Vec<Vec<f32>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<(f64, Vec<Vec<f32>>)> = batch
        .par_iter()
        .map(|s| sample_loss_grad::<f32, f32>(params, &params.values, s))
        .collect::<Result<_>>()?;
    let total: usize = batch.iter().map(|s| s.labels.len()).sum();
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f32>> = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
    for ((l, g), s) in parts.into_iter().zip(batch) {
        let w = s.labels.len() as f64 / total as f64;
        loss += l * w;
        for (acc, gk) in grads.iter_mut().zip(g) {
            for (a, v) in acc.iter_mut().zip(gk) {
                *a += (v as f64 * w) as f32;
            }
        }
    }
    Ok((loss, grads))
}

/// Single-sample loss and gradient in 64-bit arithmetic. `values` replaces
/// the stored weights and must follow `params.specs`.
pub fn loss_and_grad_f64(params: &ModelParams, values: &[Vec<f64>], sample: &PatchSample) -> Result<(f64, Vec<Vec<f64>>)> {
    sample_loss_grad::<f64, f64>(params, values, sample)
}

/// Per-pixel argmax of channel-major logits; ties go to the lower class.
pub fn argmax_classes(logits: &[f32], n_classes: usize) -> Vec<u8> {
    let n = logits.len() / n_classes;
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..n_classes {
                if logits[c * n + p] > logits[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn predict(params: &ModelParams, sample: &PatchSample) -> Result<Vec<u8>> {
    check_sample(params, sample)?;
    let logits = super::forward(params, &sample.features, sample.size, sample.size)?;
    Ok(argmax_classes(&logits, params.config.n_classes))
}

/// `steps` Adam updates cycling through `samples` in order, `batch` at a
/// time. Returns the loss of each step.
pub fn train_steps(params: &mut ModelParams, samples: &[PatchSample], steps: usize, lr: f64, batch: usize) -> Result<Vec<f64>> {
    if samples.is_empty() || batch == 0 {
        return Err(Error::invalid("training needs samples and a positive batch size"));
    }
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let b: Vec<PatchSample> = (0..batch).map(|k| samples[(s * batch + k) % samples.len()].clone()).collect();
        let (loss, g) = loss_and_grad(params, &b)?;
        adam_step(params, &g, lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Epoch loop with a seeded shuffle per epoch. `on_epoch` receives the
/// epoch index and mean training loss.
pub fn train(params: &mut ModelParams, samples: &[PatchSample], cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    for epoch in 0..cfg.epochs {
        let mut rng = keyed_prng(&[cfg.seed, SHUFFLE_STREAM, epoch as u64]);
        let order = permutation(&mut rng, samples.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let b: Vec<PatchSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, g) = loss_and_grad(params, &b)?;
            adam_step(params, &g, cfg.lr)?;
            sum += loss;
            batches += 1;
        }
        on_epoch(epoch, sum / batches as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = [0.3f32, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        Adam::default().update(&mut w, &mut m, &mut v, &[0.0, 0.0], 1, 0.1);
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3f32, 0.5, -40.0] {
            let mut w = [1.0f32];
            let (mut m, mut v) = ([0.0], [0.0]);
            Adam::default().update(&mut w, &mut m, &mut v, &[g], 1, 0.01);
            let dw = (w[0] - 1.0) as f64;
            assert!((dw.abs() - 0.01).abs() < 1e-5 * 0.01 + 1e-7, "{dw}");
            assert_eq!(dw.signum(), -(g as f64).signum());
        }
    }

    #[test]
    fn quadratic_converges_like_the_recurrence() {
        let mut w = [1.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        let (mut rw, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200u64 {
            let g = [2.0 * w[0]];
            Adam::default().update(&mut w, &mut m, &mut v, &g, t, 0.1);
            let rg = 2.0 * rw;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rw -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(w[0].abs() < 0.05 && rw.abs() < 0.05);
        assert!((w[0] as f64 - rw).abs() < 1e-3);
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = [1.0, 0.0, 1.0, 2.0, 0.0, 2.0];
        assert_eq!(argmax_classes(&logits, 3), vec![0, 1]);
    }
}
