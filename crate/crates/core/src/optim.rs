//! Adam, weight decay, gradient clipping and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionNorm;
use crate::data::{mask_supervision, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{report, ReportOptions};
use crate::layers::BnMode;
use crate::model::{BatchItem, Losses, Mode, ModelParams, Objective, ParamKind};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moment estimates for every tensor of a model, in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = model.tensors().into_iter().map(|(_, t)| t.zeros_like()).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update of a flat parameter slice. `t` is the step number after
/// incrementing, so it starts at 1.
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

fn check_gradients(grads: &ModelParams) -> Result<()> {
    let mut bad = None;
    grads.visit(|meta, t| {
        if bad.is_none() && meta.trainable() && !t.is_finite() {
            bad = Some(meta);
        }
    });
    match bad {
        Some(meta) => Err(Error::NonFiniteGradient {
            group: meta.group.into(),
            param: meta.name.into(),
        }),
        None => Ok(()),
    }
}

/// Updates every trainable tensor of `params`. Running statistics are left
/// alone.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<()> {
    check_gradients(grads)?;
    state.t += 1;
    let t = state.t;
    let config = state.config;
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((meta, p), (_, g)), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if meta.trainable() {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, &config);
        }
    }
    Ok(())
}

/// `g ← g + coefficient·θ` on weight matrices and embeddings only.
pub fn apply_weight_decay(params: &ModelParams, grads: &mut ModelParams, coefficient: f64) -> Result<()> {
    if !(coefficient >= 0.0) {
        return Err(Error::Config(format!("weight decay {coefficient} must be non-negative")));
    }
    if coefficient == 0.0 {
        return Ok(());
    }
    for ((meta, g), (_, p)) in grads.tensors_mut().into_iter().zip(params.tensors()) {
        if meta.kind == ParamKind::Weight {
            g.axpy(coefficient, p)?;
        }
    }
    Ok(())
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit(|meta, t| {
        if meta.trainable() {
            sq += t.norm_sq();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.visit_mut(|meta, t| {
            if meta.trainable() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        });
    }
    norm
}

/// Supervision fractions with a known λ.
pub const LAMBDA_ANCHORS: [(f64, f64); 2] = [(0.0312, 200.0), (0.125, 50.0)];

/// Default weight of the attention loss for a supervision fraction: the two
/// anchors joined by a straight line in log-log space, extended on the same
/// line beyond them. No supervision gives 0.
pub fn default_lambda(fraction: f64) -> f64 {
    if fraction <= 0.0 {
        return 0.0;
    }
    let [(f0, l0), (f1, l1)] = LAMBDA_ANCHORS;
    if fraction == f0 {
        return l0;
    }
    if fraction == f1 {
        return l1;
    }
    let slope = (l1.ln() - l0.ln()) / (f1.ln() - f0.ln());
    (l0.ln() + slope * (fraction.ln() - f0.ln())).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// `None`: 0.0005 in unsupervised mode, else 0.
    pub weight_decay: Option<f64>,
    /// `None`: [`default_lambda`] of the supervision fraction.
    pub lambda: Option<f64>,
    pub supervision_fraction: f64,
    pub seed: u64,
    /// `None`: on whenever the mode uses box supervision.
    pub batchnorm: Option<bool>,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub att_norm: AttentionNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::SemiSupervised,
            batch_size: 32,
            epochs: 20,
            adam: AdamConfig::default(),
            weight_decay: None,
            lambda: None,
            supervision_fraction: 1.0,
            seed: 0,
            batchnorm: None,
            clip_norm: 5.0,
            att_norm: AttentionNorm::Batch,
        }
    }
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.mode == Mode::Eval {
            return err("cannot train in eval mode");
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.supervision_fraction) {
            return err("supervision_fraction must lie in [0, 1]");
        }
        if self.weight_decay.is_some_and(|w| !(w >= 0.0)) {
            return err("weight_decay must be non-negative");
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0) || !l.is_finite()) {
            return err("lambda must be finite and non-negative");
        }
        if !(self.clip_norm >= 0.0) {
            return err("clip_norm must be non-negative");
        }
        self.adam.validate()
    }

    pub fn resolved_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(if self.mode == Mode::Unsupervised {
            DEFAULT_WEIGHT_DECAY
        } else {
            0.0
        })
    }

    pub fn resolved_batchnorm(&self) -> bool {
        self.batchnorm.unwrap_or(self.mode.uses_attention_loss())
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| default_lambda(self.supervision_fraction))
    }

    pub fn objective(&self) -> Objective {
        Objective {
            mode: self.mode,
            lambda: self.resolved_lambda(),
            att_norm: self.att_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_att: Option<f64>,
    pub l_rec: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Losses of one optimization step, as reported to a batch observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub lambda: f64,
    pub losses: Losses,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy (the last one without a
    /// validation set).
    pub model: ModelParams,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Optimizer state at the best epoch.
    pub adam: AdamState,
    /// Parameters after the final epoch.
    pub last: ModelParams,
}

/// Phrase references `(sample, phrase)` used for training under `config`:
/// all phrases, after masking supervision, minus unlabeled ones in fully
/// supervised mode.
pub fn training_set(dataset: &DatasetManifest, config: &TrainConfig) -> Result<DatasetManifest> {
    match config.mode {
        Mode::Unsupervised => mask_supervision(dataset, 0.0, config.seed),
        _ => mask_supervision(dataset, config.supervision_fraction, config.seed),
    }
}

fn phrase_refs(dataset: &DatasetManifest, mode: Mode) -> Vec<(usize, usize)> {
    let mut refs = Vec::new();
    for (si, s) in dataset.samples.iter().enumerate() {
        for (pi, p) in s.phrases.iter().enumerate() {
            if mode != Mode::FullySupervised || p.gt_attention.is_some() {
                refs.push((si, pi));
            }
        }
    }
    refs
}

/// Splits into batches of `size`; a trailing batch of one phrase joins the
/// one before it, since batch statistics need two.
fn batches<T: Copy>(items: &[T], size: usize) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = items.chunks(size).map(<[T]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Trains `model` on `train` (already masked; see [`training_set`]) and
/// keeps the epoch with the best accuracy on `val`.
pub fn train(
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    config: &TrainConfig,
    model: ModelParams,
) -> Result<TrainOutcome> {
    train_observed(train, val, config, model, |_| {})
}

pub fn train_observed(
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    config: &TrainConfig,
    mut model: ModelParams,
    mut on_batch: impl FnMut(&BatchLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let refs = phrase_refs(train, config.mode);
    if refs.is_empty() {
        return Err(Error::Data(format!(
            "no trainable phrases in split {:?} for mode {}",
            train.split,
            config.mode.name()
        )));
    }
    let objective = config.objective();
    let decay = config.resolved_weight_decay();
    let mut adam = AdamState::new(&model, config.adam);
    let mut grads = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = refs;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams, AdamState)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut totals, mut atts, mut recs) = (Vec::new(), Vec::new(), Vec::new());
        for (b, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&(si, pi)| BatchItem {
                    phrase: &train.samples[si].phrases[pi],
                    proposals: &train.samples[si].proposals,
                })
                .collect();
            grads.zero();
            let result = model.run_batch(&items, &objective, BnMode::Train, Some(&mut grads), false)?;
            let loss = result.losses.total.expect("training objectives produce a loss");
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            on_batch(&BatchLog {
                epoch,
                batch: b,
                size: items.len(),
                lambda: objective.lambda,
                losses: result.losses,
            });
            totals.push(loss);
            atts.extend(result.losses.l_att);
            recs.extend(result.losses.l_rec);

            apply_weight_decay(&model, &mut grads, decay)?;
            if config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, config.clip_norm);
            }
            adam_step(&mut model, &grads, &mut adam)?;
            model.commit_batchnorm(&result);
        }

        let val_accuracy = match val {
            Some(v) => Some(report(v, &model, &ReportOptions::default())?.overall_accuracy),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: mean(&totals).expect("at least one batch"),
            l_att: mean(&atts),
            l_rec: mean(&recs),
            val_accuracy,
        });
        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, ..)| score > *s || val_accuracy.is_none()) {
            best = Some((score, epoch, model.clone(), adam.clone()));
        }
    }

    let (_, best_epoch, best_model, best_adam) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        metrics,
        adam: best_adam,
        last: model,
    })
}
