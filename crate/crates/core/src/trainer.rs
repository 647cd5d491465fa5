//! Training protocol for the classifier head.
//!
//! Up to 100 epochs of class-balanced mini-batches of 64, AdamW at 1e-4,
//! cross-entropy loss, and early stopping once the dev loss has gone 10
//! epochs without improving. Only head parameters are updated.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetManifest, Label};
use crate::embedding::{softmax, EmbeddingError, EmbeddingProvider};
use crate::fsutil;
use crate::head::{Architecture, Gradients, HeadError, HeadModel, Prediction};
use crate::metrics::{self, ScoreRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("manifest '{manifest}' has no {class} samples")]
    EmptyClass { manifest: String, class: Label },
    #[error("manifest '{0}' is empty")]
    EmptyManifest(String),
    #[error("tensor count mismatch: {params} parameter tensors, {grads} gradient tensors")]
    TensorCount { params: usize, grads: usize },
    #[error("shape mismatch in tensor '{tensor}': parameter has {param_len} values, gradient {grad_len}")]
    ShapeMismatch {
        tensor: String,
        param_len: usize,
        grad_len: usize,
    },
    #[error("non-finite gradient in tensor '{tensor}' at index {index} (value {value})")]
    NonFiniteGradient {
        tensor: String,
        index: usize,
        value: f64,
    },
    #[error("provider shape ({rows}, {cols}) does not fit the head input dimension {input_dim}")]
    ProviderMismatch {
        rows: usize,
        cols: usize,
        input_dim: usize,
    },
    #[error("utterance '{id}': {source}")]
    Provider {
        id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("utterance '{id}': {source}")]
    Head {
        id: String,
        #[source]
        source: HeadError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            patience: 10,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!(
                "batch_size must be even and at least 2, got {}",
                self.batch_size
            ));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Loss matching the head's output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Two-way softmax followed by cross-entropy (Whisper head).
    SoftmaxCrossEntropy,
    /// Sigmoid followed by binary cross-entropy (Wav2Vec head).
    SigmoidBce,
}

impl LossKind {
    pub fn for_architecture(arch: &Architecture) -> Self {
        match arch {
            Architecture::Whisper { .. } => LossKind::SoftmaxCrossEntropy,
            Architecture::Wav2Vec { .. } => LossKind::SigmoidBce,
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Loss value and its gradient with respect to the logits, both computed
/// from the logits in log-space.
pub fn loss(kind: LossKind, pred: &Prediction, label: Label) -> (f64, Vec<f64>) {
    let y = label.as_u8() as usize;
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let z = &pred.logits;
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut grad = softmax(z);
            grad[y] -= 1.0;
            (lse - z[y], grad)
        }
        LossKind::SigmoidBce => {
            let z = pred.logits[0];
            // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
            let value = softplus(z) - y as f64 * z;
            let sig = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            (value, vec![sig - y as f64])
        }
    }
}

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamW) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One AdamW update. Decoupled decay `θ ← θ − lr·wd·θ` is applied before the
/// bias-corrected Adam step. Moments are allocated on the first call.
///
/// Gradients are validated before anything is modified, so a failed step
/// leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut [(String, &mut [f64])],
    grads: &[(String, &[f64])],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    if !(lr > 0.0) {
        return Err(TrainError::Config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(TrainError::TensorCount {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for ((name, p), (_, g)) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(TrainError::ShapeMismatch {
                tensor: name.clone(),
                param_len: p.len(),
                grad_len: g.len(),
            });
        }
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                tensor: name.clone(),
                index,
                value,
            });
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    for (i, (name, p)) in params.iter().enumerate() {
        if state.first[i].len() != p.len() {
            return Err(TrainError::ShapeMismatch {
                tensor: name.clone(),
                param_len: p.len(),
                grad_len: state.first[i].len(),
            });
        }
    }

    state.step += 1;
    let AdamW {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.hyper;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for k in 0..p.len() {
            p[k] *= decay;
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Applies [`adamw_step`] to a head model.
pub fn step_model(
    model: &mut HeadModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    let mut params = model.params_mut();
    adamw_step(&mut params, &grads.tensors(), state, lr)
}

fn fill_from_permutations(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm = pool.to_vec();
        perm.shuffle(rng);
        let take = (count - out.len()).min(perm.len());
        out.extend_from_slice(&perm[..take]);
    }
    out
}

/// Batches of manifest indices for one epoch, each with `batch_size / 2`
/// samples of either class.
///
/// The epoch has `ceil(majority / half)` batches, so every majority sample is
/// seen at least once. The minority class is drawn from successive shuffled
/// passes over itself, which repeats each minority sample as evenly as
/// possible. Order depends only on `seed` and `epoch`.
pub fn balanced_batches(
    labels: &[Label],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(TrainError::Config(format!(
            "batch_size must be even and at least 2, got {batch_size}"
        )));
    }
    let real: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Label::Bonafide)
        .collect();
    let fake: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Label::Fake)
        .collect();
    for (pool, class) in [(&real, Label::Bonafide), (&fake, Label::Fake)] {
        if pool.is_empty() {
            return Err(TrainError::EmptyClass {
                manifest: "train".into(),
                class,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let half = batch_size / 2;
    let n_batches = real.len().max(fake.len()).div_ceil(half);
    let real_slots = fill_from_permutations(&real, n_batches * half, &mut rng);
    let fake_slots = fill_from_permutations(&fake, n_batches * half, &mut rng);

    Ok((0..n_batches)
        .map(|b| {
            let range = b * half..(b + 1) * half;
            let mut batch: Vec<usize> = real_slots[range.clone()]
                .iter()
                .chain(&fake_slots[range])
                .copied()
                .collect();
            batch.shuffle(&mut rng);
            batch
        })
        .collect())
}

/// [`balanced_batches`] over a manifest.
pub fn manifest_batches(
    train: &DatasetManifest,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let labels: Vec<Label> = train.entries().iter().map(|u| u.label).collect();
    balanced_batches(&labels, batch_size, seed, epoch).map_err(|e| match e {
        TrainError::EmptyClass { class, .. } => TrainError::EmptyClass {
            manifest: train.name.clone(),
            class,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stalled,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower dev loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, dev_loss: f64) -> Verdict {
        let improved = match self.best {
            None => dev_loss.is_finite(),
            Some((_, best)) => dev_loss < best,
        };
        if improved {
            self.best = Some((epoch, dev_loss));
            self.since_best = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stalled
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Percent; NaN when the dev set lacks one class.
    pub dev_eer: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,dev_loss,dev_eer,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                e.epoch, e.train_loss, e.dev_loss, e.dev_eer, e.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        fsutil::write_bytes_atomic(path, self.to_csv().as_bytes()).map_err(|source| {
            TrainError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// What one epoch reports back to [`run_epochs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_eer: f64,
}

/// Epoch loop with early stopping. `epoch_fn` trains `model` for one epoch
/// (epochs are 1-based) and reports losses; the model as it stood after the
/// best epoch is returned.
pub fn run_epochs<F>(
    mut model: HeadModel,
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: F,
) -> Result<(HeadModel, TrainLog), TrainError>
where
    F: FnMut(&mut HeadModel, usize) -> Result<EpochStats, TrainError>,
{
    let mut monitor = EarlyStopping::new(patience);
    let mut log = TrainLog::default();
    let mut best = model.clone();
    for epoch in 1..=max_epochs {
        let started = Instant::now();
        let stats = epoch_fn(&mut model, epoch)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.train_loss,
            dev_loss: stats.dev_loss,
            dev_eer: stats.dev_eer,
            seconds: started.elapsed().as_secs_f64(),
        });
        match monitor.observe(epoch, stats.dev_loss) {
            Verdict::Improved => best = model.clone(),
            Verdict::Stalled => {}
            Verdict::Stop => break,
        }
    }
    log.best_epoch = monitor.best_epoch().unwrap_or(0);
    Ok((best, log))
}

/// Time-pooled features of one utterance, ready for the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub dataset: String,
    pub pooled: Vec<Vec<f64>>,
}

/// Loads and pools every utterance of a manifest. Extraction runs in
/// parallel; results keep manifest order.
pub fn load_samples(
    provider: &dyn EmbeddingProvider,
    manifest: &DatasetManifest,
) -> Result<Vec<Sample>, TrainError> {
    manifest
        .entries()
        .par_iter()
        .map(|u| {
            let e = provider.provide(u).map_err(|source| TrainError::Provider {
                id: u.id.clone(),
                source,
            })?;
            Ok(Sample {
                id: u.id.clone(),
                label: u.label,
                dataset: u.dataset.clone(),
                pooled: e.pooled_layers(),
            })
        })
        .collect()
}

/// Mean loss over `samples` and, when both classes are present, the EER.
pub fn evaluate_samples(
    model: &HeadModel,
    samples: &[Sample],
) -> Result<(f64, Vec<ScoreRecord>), TrainError> {
    let kind = LossKind::for_architecture(&model.architecture);
    let mut total = 0.0;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model
            .forward_pooled(&s.pooled)
            .map_err(|source| TrainError::Head {
                id: s.id.clone(),
                source,
            })?;
        total += loss(kind, &pred, s.label).0;
        records.push(ScoreRecord::new(&s.id, pred.score, s.label, &s.dataset));
    }
    Ok((total / samples.len().max(1) as f64, records))
}

fn check_class(samples: &[Sample], name: &str) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyManifest(name.to_string()));
    }
    for class in [Label::Bonafide, Label::Fake] {
        if !samples.iter().any(|s| s.label == class) {
            return Err(TrainError::EmptyClass {
                manifest: name.to_string(),
                class,
            });
        }
    }
    Ok(())
}

/// Full training run on pre-pooled features.
pub fn fit_samples(
    model: HeadModel,
    train: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
) -> Result<(HeadModel, TrainLog), TrainError> {
    cfg.validate()?;
    check_class(train, "train")?;
    if dev.is_empty() {
        return Err(TrainError::EmptyManifest("dev".into()));
    }
    let kind = LossKind::for_architecture(&model.architecture);
    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    let mut state = OptimizerState::new(cfg.adamw());

    run_epochs(model, cfg.max_epochs, cfg.patience, |model, epoch| {
        let batches = balanced_batches(&labels, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut grads = Gradients::zeros_like(model);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train[i];
                let (pred, trace) =
                    model
                        .forward_traced(&s.pooled)
                        .map_err(|source| TrainError::Head {
                            id: s.id.clone(),
                            source,
                        })?;
                let (value, grad_logits) = loss(kind, &pred, s.label);
                batch_loss += value;
                let g = model
                    .backward(&trace, &grad_logits)
                    .map_err(|source| TrainError::Head {
                        id: s.id.clone(),
                        source,
                    })?;
                grads.add_assign(&g);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            epoch_loss += batch_loss / n;
            step_model(model, &grads, &mut state, cfg.learning_rate)?;
        }
        let (dev_loss, records) = evaluate_samples(model, dev)?;
        let dev_eer = metrics::eer(&records).map(|e| e.percent).unwrap_or(f64::NAN);
        Ok(EpochStats {
            train_loss: epoch_loss / batches.len() as f64,
            dev_loss,
            dev_eer,
        })
    })
}

/// Checks that a provider's declared features fit the head.
pub fn check_provider(
    provider: &dyn EmbeddingProvider,
    model: &HeadModel,
) -> Result<(), TrainError> {
    let c = provider.contract();
    if c.cols != model.architecture.input_dim() {
        return Err(TrainError::ProviderMismatch {
            rows: c.rows,
            cols: c.cols,
            input_dim: model.architecture.input_dim(),
        });
    }
    Ok(())
}

/// Trains `model` on `train`, early-stopping on `dev`; returns the
/// checkpoint of the best dev-loss epoch and the per-epoch log.
pub fn fit(
    model: HeadModel,
    provider: &dyn EmbeddingProvider,
    train: &DatasetManifest,
    dev: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(HeadModel, TrainLog), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyManifest(train.name.clone()));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyManifest(dev.name.clone()));
    }
    check_provider(provider, &model)?;
    let train_samples = load_samples(provider, train)?;
    check_class(&train_samples, &train.name)?;
    let dev_samples = load_samples(provider, dev)?;
    fit_samples(model, &train_samples, &dev_samples, cfg)
}

/// Scores every utterance of a manifest.
pub fn score_manifest(
    model: &HeadModel,
    provider: &dyn EmbeddingProvider,
    manifest: &DatasetManifest,
) -> Result<Vec<ScoreRecord>, TrainError> {
    check_provider(provider, model)?;
    let samples = load_samples(provider, manifest)?;
    Ok(evaluate_samples(model, &samples)?.1)
}
