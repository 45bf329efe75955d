//! Entropy objective, Adam, and the episodic/online adaptation protocols,
//! together with the no-adaptation, BN-statistics and TENT-style baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::FilterKind;
use crate::network::{train::argmax_rows, AdaptTarget, BnMode, GradTarget, Model};
use crate::tensor::{Matrix, Tensor4};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Adaptation state is restored after every batch.
    Episodic,
    /// Adaptation state persists across the batches of one run.
    Online,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Episodic => "episodic",
            Protocol::Online => "online",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent, `p -= lr * g`.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub protocol: Protocol,
    pub learning_rate: f64,
    pub steps_per_batch: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub optimizer: Optimizer,
    /// Initial value of every `γ_i` when a filter is built.
    pub gamma_init: f64,
    /// Order in which the harness presents test samples.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Episodic,
            learning_rate: 0.001,
            steps_per_batch: 1,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            optimizer: Optimizer::Adam,
            gamma_init: 0.0,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// `lr = 0` is accepted so that the null-update collapse can be run.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be finite and ≥ 0, got {}", self.learning_rate));
        }
        if self.steps_per_batch == 0 {
            bad.push("steps_per_batch must be ≥ 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be ≥ 1".to_string());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            bad.push("adam betas must lie in [0, 1)".to_string());
        }
        if !(self.adam_eps > 0.0) {
            bad.push("adam_eps must be > 0".to_string());
        }
        if !self.gamma_init.is_finite() {
            bad.push("gamma_init must be finite".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Per-row entropy in nats.
pub fn entropy_rows(logits: &Matrix) -> Vec<f64> {
    let mut lp = vec![0.0; logits.cols()];
    (0..logits.rows())
        .map(|i| {
            log_softmax_row(logits.row(i), &mut lp);
            -lp.iter().map(|l| l.exp() * l).sum::<f64>()
        })
        .collect()
}

/// Mean entropy of the row-wise softmax.
pub fn entropy(logits: &Matrix) -> f64 {
    let rows = entropy_rows(logits);
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

/// Gradient of [`entropy`] w.r.t. the logits: `-p_k (log p_k + H) / M`.
pub fn entropy_grad(logits: &Matrix) -> Matrix {
    let m = logits.rows().max(1) as f64;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    let mut lp = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        log_softmax_row(logits.row(i), &mut lp);
        let h: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        for (o, l) in g.row_mut(i).iter_mut().zip(&lp) {
            *o = -l.exp() * (l + h) / m;
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub timestep: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            timestep: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], cfg: &AdaptConfig) -> Result<()> {
    let n = state.first_moment.len();
    if params.len() != n || grads.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("{n} moments"),
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    state.timestep += 1;
    let t = state.timestep as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g;
        state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        let m_hat = state.first_moment[i] / c1;
        let v_hat = state.second_moment[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// A labelled test batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

/// Consecutive batches of `batch_size`; the tail batch keeps whatever is left.
pub fn split_batches(images: &Tensor4, labels: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    let n = images.shape().n;
    if labels.len() != n {
        return Err(Error::shape("split_batches", format!("{n} images"), format!("{} labels", labels.len())));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
    }
    Ok((0..n)
        .step_by(batch_size)
        .map(|s| {
            let e = (s + batch_size).min(n);
            Batch {
                images: images.slice(s, e),
                labels: labels[s..e].to_vec(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub batch_size: usize,
    pub misclassified: usize,
    pub error: f64,
    /// Mean entropy before the first step (equal to `entropy_after` when nothing adapts).
    pub entropy_before: f64,
    pub entropy_after: f64,
    /// SHA-256 of the adaptation parameters used for the recorded predictions.
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub method: String,
    pub protocol: Protocol,
    pub steps_per_batch: usize,
    pub learning_rate: f64,
    pub adaptation_params: usize,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub misclassified: usize,
    pub total: usize,
    pub batches: Vec<BatchRecord>,
}

impl RunRecord {
    pub fn error(&self) -> f64 {
        self.misclassified as f64 / self.total.max(1) as f64
    }

    pub fn batch_errors(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.error).collect()
    }

    pub fn frozen_intact(&self) -> bool {
        self.frozen_hash_before == self.frozen_hash_after
    }

    /// One JSON object per batch, each tagged with `context` and the run metadata.
    pub fn write_jsonl<W: Write>(&self, out: &mut W, context: &serde_json::Value) -> Result<()> {
        for b in &self.batches {
            let line = serde_json::json!({
                "schema_version": self.schema_version,
                "context": context,
                "method": self.method,
                "protocol": self.protocol,
                "steps_per_batch": self.steps_per_batch,
                "learning_rate": self.learning_rate,
                "batch": b,
            });
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }
}

fn params_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn count_errors(logits: &Matrix, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p != y).count()
}

/// What a session adapts and how it hashes the weights it must not touch.
#[derive(Clone, Copy, Debug)]
enum Session {
    Frozen,
    Adapt(AdaptTarget),
}

impl Session {
    fn frozen_hash(self, model: &Model) -> String {
        match self {
            Session::Adapt(AdaptTarget::BnAffine) => model.weights_hash(false),
            _ => model.theta_hash(),
        }
    }
}

fn entropy_step(model: &mut Model, x: &Tensor4, target: AdaptTarget, state: &mut AdamState, cfg: &AdaptConfig) -> Result<f64> {
    let (logits, cache) = model.forward(x)?;
    let h = entropy(&logits);
    let grads = model.backward(&cache, &entropy_grad(&logits), GradTarget::Adapt(target))?;
    let mut params = model.adaptation_params(target);
    match cfg.optimizer {
        Optimizer::Adam => adam_step(state, &mut params, &grads.adapt, cfg)?,
        Optimizer::Sgd => params.iter_mut().zip(&grads.adapt).for_each(|(p, g)| *p -= cfg.learning_rate * g),
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NoConvergence {
            routine: "entropy_step",
            iterations: state.timestep as usize,
            residual: f64::NAN,
        });
    }
    model.set_adaptation_params(target, &params)?;
    Ok(h)
}

fn run(model: &Model, batches: &[Batch], session: Session, method: &str, cfg: &AdaptConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::InvalidArgument("empty batch stream".into()));
    }
    let mut model = model.clone();
    let frozen_hash_before = session.frozen_hash(&model);
    let target = match session {
        Session::Adapt(t) => Some(t),
        Session::Frozen => None,
    };
    let n_params = target.map_or(0, |t| model.adaptation_param_count(t));
    if target.is_some() && n_params == 0 {
        return Err(Error::InvalidArgument(format!("{method}: model exposes no adaptation parameters")));
    }
    let initial = target.map(|t| model.adaptation_params(t)).unwrap_or_default();
    let mut state = AdamState::new(n_params);
    let mut records = Vec::with_capacity(batches.len());
    let (mut wrong, mut total) = (0, 0);
    for (bi, batch) in batches.iter().enumerate() {
        if batch.labels.len() != batch.images.shape().n || batch.labels.is_empty() {
            return Err(Error::InvalidArgument(format!("batch {bi}: empty or mislabelled")));
        }
        let mut before = None;
        if let Some(t) = target {
            for _ in 0..cfg.steps_per_batch {
                let h = entropy_step(&mut model, &batch.images, t, &mut state, cfg)?;
                before.get_or_insert(h);
            }
        }
        let logits = model.logits(&batch.images)?;
        let after = entropy(&logits);
        let miss = count_errors(&logits, &batch.labels);
        let params = target.map(|t| model.adaptation_params(t)).unwrap_or_default();
        records.push(BatchRecord {
            batch_index: bi,
            batch_size: batch.labels.len(),
            misclassified: miss,
            error: miss as f64 / batch.labels.len() as f64,
            entropy_before: before.unwrap_or(after),
            entropy_after: after,
            params_hash: params_hash(&params),
        });
        wrong += miss;
        total += batch.labels.len();
        if let (Some(t), Protocol::Episodic) = (target, cfg.protocol) {
            model.set_adaptation_params(t, &initial)?;
            state = AdamState::new(n_params);
        }
    }
    Ok(RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        method: method.to_string(),
        protocol: cfg.protocol,
        steps_per_batch: if target.is_some() { cfg.steps_per_batch } else { 0 },
        learning_rate: if target.is_some() { cfg.learning_rate } else { 0.0 },
        adaptation_params: n_params,
        frozen_hash_before,
        frozen_hash_after: session.frozen_hash(&model),
        misclassified: wrong,
        total,
        batches: records,
    })
}

fn filter_method(model: &Model) -> Result<String> {
    model
        .spectral()
        .map(|s| match s.filter.kind() {
            FilterKind::ReluRidge => "ttawpca-relu".to_string(),
            FilterKind::NegExp => "ttawpca-exp".to_string(),
        })
        .ok_or_else(|| Error::InvalidArgument("model has no adaptation layer".into()))
}

/// Filter adaptation, restoring `Γ` and the Adam moments after every batch.
pub fn adapt_episodic(model: &Model, batches: &[Batch], cfg: &AdaptConfig) -> Result<RunRecord> {
    let cfg = AdaptConfig { protocol: Protocol::Episodic, ..cfg.clone() };
    run(model, batches, Session::Adapt(AdaptTarget::Filter), &filter_method(model)?, &cfg)
}

/// Filter adaptation carrying `Γ` and the Adam moments across batches.
pub fn adapt_online(model: &Model, batches: &[Batch], cfg: &AdaptConfig) -> Result<RunRecord> {
    let cfg = AdaptConfig { protocol: Protocol::Online, ..cfg.clone() };
    run(model, batches, Session::Adapt(AdaptTarget::Filter), &filter_method(model)?, &cfg)
}

/// Filter adaptation under `cfg.protocol`.
pub fn adapt(model: &Model, batches: &[Batch], cfg: &AdaptConfig) -> Result<RunRecord> {
    run(model, batches, Session::Adapt(AdaptTarget::Filter), &filter_method(model)?, cfg)
}

/// Pure inference with the model as given.
pub fn baseline_no_adapt(model: &Model, batches: &[Batch]) -> Result<RunRecord> {
    run(model, batches, Session::Frozen, "no-adapt", &AdaptConfig::default())
}

/// Inference with every BN layer normalizing by the test batch's own statistics.
pub fn baseline_bn_stats(model: &Model, batches: &[Batch]) -> Result<RunRecord> {
    let mut m = model.clone();
    m.set_bn_mode(BnMode::BatchStats);
    run(&m, batches, Session::Frozen, "bn-stats", &AdaptConfig::default())
}

/// Batch-statistics BN with scale and shift adapted by entropy minimization.
pub fn baseline_tent(model: &Model, batches: &[Batch], cfg: &AdaptConfig) -> Result<RunRecord> {
    let mut m = model.clone();
    m.set_bn_mode(BnMode::BatchStats);
    run(&m, batches, Session::Adapt(AdaptTarget::BnAffine), "tent", cfg)
}
