//! Central finite-difference verification of the analytic gradients, reported
//! per parameter group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionNorm, BBox, Phrase, ProposalSet};
use crate::error::Result;
use crate::layers::{BnMode, NUM_RESERVED};
use crate::model::{BatchItem, Mode, ModelConfig, ModelParams, Objective};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub vocab_size: usize,
    pub proposals: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub lambda: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            vocab_size: 10,
            proposals: 4,
            feature_dim: 6,
            embed_dim: 8,
            hidden_dim: 8,
            attention_dim: 8,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 17,
            lambda: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub mode: String,
    pub batchnorm: bool,
    pub group: String,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Gradient magnitudes below this are compared by absolute error: central
/// differences in `f64` carry roughly 1e-10 of rounding noise at step 1e-5.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Tiny random batch: two images, three phrases, one of them unlabeled.
pub fn tiny_batch(cfg: &GradcheckConfig, rng: &mut impl Rng) -> Result<(Vec<ProposalSet>, Vec<(usize, Phrase)>)> {
    let mut images = Vec::new();
    for _ in 0..2 {
        let boxes = (0..cfg.proposals)
            .map(|i| BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0))
            .collect::<Result<Vec<_>>>()?;
        let data = (0..cfg.proposals * cfg.feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        images.push(ProposalSet::new(boxes, Tensor::new(vec![cfg.proposals, cfg.feature_dim], data)?)?);
    }
    let mut phrase = |len: usize, gt: Option<usize>| Phrase {
        tokens: (0..len).map(|_| rng.random_range(NUM_RESERVED..cfg.vocab_size)).collect(),
        sentence_id: 0,
        phrase_type: None,
        gt_box: None,
        gt_attention: gt,
    };
    let phrases = vec![
        (0, phrase(3, Some(1))),
        (0, phrase(2, None)),
        (1, phrase(2, Some(cfg.proposals - 1))),
    ];
    Ok((images, phrases))
}

/// Loss of a batch as a pure function of the parameters.
fn batch_loss(model: &ModelParams, items: &[BatchItem], objective: &Objective) -> Result<f64> {
    let r = model.run_batch(items, objective, BnMode::Train, None, false)?;
    Ok(r.losses.total.unwrap_or(0.0))
}

pub fn check_model(
    model: &ModelParams,
    items: &[BatchItem],
    objective: &Objective,
    step: f64,
    tolerance: f64,
) -> Result<Vec<GroupCheck>> {
    let mut grads = model.zeros_like();
    model.run_batch(items, objective, BnMode::Train, Some(&mut grads), false)?;
    let analytic: Vec<(crate::model::ParamMeta, Vec<f64>)> =
        grads.tensors().into_iter().map(|(m, t)| (m, t.data().to_vec())).collect();

    let mut probe = model.clone();
    let mut groups: Vec<GroupCheck> = Vec::new();
    for (ti, (meta, a)) in analytic.iter().enumerate() {
        if !meta.trainable() {
            continue;
        }
        if meta.group == "batchnorm" && !model.config.batchnorm {
            continue;
        }
        let mut worst: f64 = 0.0;
        for k in 0..a.len() {
            let original = nth(&mut probe, ti).data()[k];
            nth(&mut probe, ti).data_mut()[k] = original + step;
            let plus = batch_loss(&probe, items, objective)?;
            nth(&mut probe, ti).data_mut()[k] = original - step;
            let minus = batch_loss(&probe, items, objective)?;
            nth(&mut probe, ti).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a[k], numeric));
        }
        match groups.iter_mut().find(|g| g.group == meta.group) {
            Some(g) => {
                g.parameters += a.len();
                g.max_rel_error = g.max_rel_error.max(worst);
                g.passed = g.max_rel_error < tolerance;
            }
            None => groups.push(GroupCheck {
                mode: objective.mode.name().to_string(),
                batchnorm: model.config.batchnorm,
                group: meta.group.to_string(),
                parameters: a.len(),
                max_rel_error: worst,
                passed: worst < tolerance,
            }),
        }
    }
    Ok(groups)
}

fn nth(model: &mut ModelParams, i: usize) -> &mut Tensor {
    model.tensors_mut().swap_remove(i).1
}

/// Runs the check for the unsupervised graph and the semi-supervised graph
/// (the latter with batch normalization, as in supervised training).
pub fn run(cfg: &GradcheckConfig) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (images, phrases) = tiny_batch(cfg, &mut rng)?;
    let items: Vec<BatchItem> = phrases
        .iter()
        .map(|(img, p)| BatchItem {
            phrase: p,
            proposals: &images[*img],
        })
        .collect();
    let mut report = Vec::new();
    for (mode, batchnorm) in [
        (Mode::Unsupervised, false),
        (Mode::SemiSupervised, false),
        (Mode::SemiSupervised, true),
        (Mode::FullySupervised, true),
    ] {
        let config = ModelConfig {
            vocab_size: cfg.vocab_size,
            feature_dim: cfg.feature_dim,
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.hidden_dim,
            attention_dim: cfg.attention_dim,
            batchnorm,
            lstm_init_scale: 0.5,
            ..ModelConfig::default()
        };
        let mut model = ModelParams::new(config, cfg.seed)?;
        // move batchnorm away from its identity initialization
        if batchnorm {
            for t in [
                &mut model.bn_phrase.scale,
                &mut model.bn_phrase.shift,
                &mut model.bn_visual.scale,
                &mut model.bn_visual.shift,
            ] {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
            }
        }
        let objective = Objective {
            mode,
            lambda: cfg.lambda,
            att_norm: AttentionNorm::Batch,
        };
        report.extend(check_model(&model, &items, &objective, cfg.step, cfg.tolerance)?);
    }
    Ok(report)
}
