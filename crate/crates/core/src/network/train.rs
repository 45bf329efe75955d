//! Supervised training of the frozen weights: cross-entropy, plain SGD,
//! batch-statistics BN with running averages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BnMode, Layer, ParamGrad, BN_MOMENTUM};
use super::{GradTarget, Model};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= grad.get(i, y).max(f64::MIN_POSITIVE).ln();
        let v = grad.get(i, y);
        grad.set(i, y, v - 1.0);
    }
    (loss / n as f64, grad.scale(1.0 / n as f64))
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn sgd_update(model: &mut Model, grads: &[ParamGrad], lr: f64) {
    let step = |w: &mut [f64], g: &[f64]| w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
    for (layer, g) in model.layers_mut().iter_mut().zip(grads) {
        match (layer, g) {
            (Layer::Conv2d(c), ParamGrad::Conv { weight, bias }) => {
                step(&mut c.weight, weight);
                step(&mut c.bias, bias);
            }
            (Layer::Linear(l), ParamGrad::Linear { weight, bias }) => {
                step(&mut l.weight, weight);
                step(&mut l.bias, bias);
            }
            (Layer::BatchNorm(b), ParamGrad::Bn { scale, shift }) => {
                step(&mut b.scale, scale);
                step(&mut b.shift, shift);
            }
            _ => {}
        }
    }
}

/// Trains `model` in place and leaves every BN layer in frozen-stats mode.
pub fn train(model: &mut Model, images: &Tensor4, labels: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "training needs epochs ≥ 1, batch_size ≥ 1 and learning_rate > 0".into(),
        ));
    }
    let n = images.shape().n;
    if labels.len() != n {
        return Err(Error::shape("train", format!("{n} images"), format!("{} labels", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    model.set_bn_mode(BnMode::BatchStats);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let x = images.select(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = model.forward(&x)?;
            let (loss, grad) = cross_entropy(&logits, &y);
            let grads = model.backward(&cache, &grad, GradTarget::All)?;
            sgd_update(model, &grads.layers, cfg.learning_rate);
            for (i, layer) in model.layers_mut().iter_mut().enumerate() {
                if let (Layer::BatchNorm(b), Some(super::LayerCache::Bn(bc))) = (layer, cache.layer(i)) {
                    for c in 0..b.channels {
                        b.running_mean[c] = (1.0 - BN_MOMENTUM) * b.running_mean[c] + BN_MOMENTUM * bc.batch_mean[c];
                        b.running_var[c] = (1.0 - BN_MOMENTUM) * b.running_var[c] + BN_MOMENTUM * bc.batch_var[c];
                    }
                }
            }
            total += loss;
            batches += 1;
        }
        epoch_loss.push(total / batches.max(1) as f64);
    }
    model.set_bn_mode(BnMode::FrozenStats);
    let train_accuracy = accuracy(model, images, labels, 256)?;
    Ok(TrainReport {
        epoch_loss,
        train_accuracy,
    })
}

/// Fraction of correctly classified samples, evaluated in chunks.
pub fn accuracy(model: &Model, images: &Tensor4, labels: &[usize], chunk: usize) -> Result<f64> {
    let n = images.shape().n;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let pred = argmax_rows(&model.logits(&images.slice(start, end))?);
        correct += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p == y).count();
        start = end;
    }
    Ok(correct as f64 / n.max(1) as f64)
}
