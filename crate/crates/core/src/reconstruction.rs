//! Reconstruction half of the model: pool the proposal features under the
//! attention weights, encode the pooled feature and regenerate the phrase
//! with an LSTM decoder.
//!
//! The decoder is teacher-forced. Step 0 consumes the encoded visual feature
//! and predicts the first token; step `t ≥ 1` consumes the embedding of token
//! `t − 1`. A phrase of `T` tokens yields `T + 1` logit vectors whose targets
//! are the tokens followed by end-of-sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, InitScheme, Linear, LstmCell, LstmStepCache, EOS_ID};
use crate::numerics::{log_likelihood_backward, log_likelihood_from_logits, Tensor};

/// `v' = relu(v_att·W_a + b_a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecEncoderParams {
    pub layer: Linear,
}

impl RecEncoderParams {
    pub fn new(feature_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        RecEncoderParams {
            layer: Linear::new(feature_dim, out_dim, InitScheme::Xavier, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        RecEncoderParams {
            layer: self.layer.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub cell: LstmCell,
    pub output: Linear,
}

impl DecoderParams {
    pub fn new(input_dim: usize, hidden: usize, vocab_size: usize, uniform_scale: f64, rng: &mut impl Rng) -> Self {
        DecoderParams {
            cell: LstmCell::new(input_dim, hidden, uniform_scale, rng),
            output: Linear::new(hidden, vocab_size, InitScheme::Xavier, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.output.n_out()
    }

    pub fn zeros_like(&self) -> Self {
        DecoderParams {
            cell: self.cell.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a finite non-negative number, got {lambda}")));
        }
        Ok(LossWeights { lambda })
    }
}

/// `Σ α_i v_i`.
pub fn aggregate_visual(weights: &[f64], features: &Tensor) -> Result<Vec<f64>> {
    if features.shape().len() != 2 || weights.len() != features.rows() {
        return Err(Error::dim("aggregate_visual", &[weights.len()], features.shape()));
    }
    let mut out = vec![0.0; features.cols()];
    for (i, &a) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(features.row(i)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Returns `(dweights, dfeatures)` for upstream gradient `g` on the pooled vector.
pub fn aggregate_visual_backward(weights: &[f64], features: &Tensor, g: &[f64]) -> (Vec<f64>, Tensor) {
    let dweights = (0..features.rows())
        .map(|i| features.row(i).iter().zip(g).map(|(v, gv)| v * gv).sum())
        .collect();
    let mut dfeatures = features.zeros_like();
    for (i, &a) in weights.iter().enumerate() {
        for (d, gv) in dfeatures.row_mut(i).iter_mut().zip(g) {
            *d = a * gv;
        }
    }
    (dweights, dfeatures)
}

/// Returns the encoded feature and its pre-activation.
pub fn encode_visual_cached(params: &RecEncoderParams, v_att: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pre = params.layer.forward(v_att)?;
    let out = pre.iter().map(|v| v.max(0.0)).collect();
    Ok((out, pre))
}

pub fn encode_visual(params: &RecEncoderParams, v_att: &[f64]) -> Result<Vec<f64>> {
    Ok(encode_visual_cached(params, v_att)?.0)
}

pub fn encode_visual_backward(
    params: &RecEncoderParams,
    v_att: &[f64],
    pre: &[f64],
    g: &[f64],
    grads: &mut RecEncoderParams,
) -> Vec<f64> {
    let dpre: Vec<f64> = pre.iter().zip(g).map(|(p, gv)| if *p > 0.0 { *gv } else { 0.0 }).collect();
    params
        .layer
        .backward(v_att, &dpre, &mut grads.layer, true)
        .expect("dx requested")
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    hidden: Vec<Vec<f64>>,
    steps: Vec<LstmStepCache>,
    tokens: Vec<usize>,
}

/// Decoding targets for a phrase: its tokens followed by end-of-sequence.
pub fn targets_with_eos(tokens: &[usize]) -> Vec<usize> {
    let mut t = tokens.to_vec();
    t.push(EOS_ID);
    t
}

pub fn decode_phrase_logits_cached(
    params: &DecoderParams,
    embed: &EmbeddingTable,
    v_prime: &[f64],
    target_tokens: &[usize],
) -> Result<(Vec<Vec<f64>>, DecodeCache)> {
    if target_tokens.is_empty() {
        return Err(Error::pre("decode_phrase_logits", "empty phrase"));
    }
    let mut inputs = Vec::with_capacity(target_tokens.len() + 1);
    inputs.push(v_prime.to_vec());
    for &t in target_tokens {
        inputs.push(embed.lookup(t)?.to_vec());
    }
    let (hidden, steps) = params.cell.run(&inputs)?;
    let logits = hidden
        .iter()
        .map(|h| params.output.forward(h))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        logits,
        DecodeCache {
            hidden,
            steps,
            tokens: target_tokens.to_vec(),
        },
    ))
}

pub fn decode_phrase_logits(
    params: &DecoderParams,
    embed: &EmbeddingTable,
    v_prime: &[f64],
    target_tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    Ok(decode_phrase_logits_cached(params, embed, v_prime, target_tokens)?.0)
}

/// Backward of the teacher-forced decoder given per-step logit gradients.
/// Embedding gradients go to `embed_grads`; returns `dL/dv'`.
pub fn decode_backward(
    params: &DecoderParams,
    embed: &EmbeddingTable,
    cache: &DecodeCache,
    dlogits: &[Vec<f64>],
    grads: &mut DecoderParams,
    embed_grads: &mut EmbeddingTable,
) -> Vec<f64> {
    let dhs: Vec<Vec<f64>> = cache
        .hidden
        .iter()
        .zip(dlogits)
        .map(|(h, g)| params.output.backward(h, g, &mut grads.output, true).expect("dx requested"))
        .collect();
    let mut dxs = params.cell.run_backward(&cache.steps, &dhs, &mut grads.cell);
    for (dx, &tok) in dxs[1..].iter().zip(&cache.tokens) {
        embed.backward(tok, dx, embed_grads);
    }
    dxs.swap_remove(0)
}

/// Negative log-likelihood of one phrase: the sum of per-step terms.
pub fn phrase_nll(step_logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if step_logits.len() != targets.len() {
        return Err(Error::Constraint(format!(
            "{} decode steps for {} targets",
            step_logits.len(),
            targets.len()
        )));
    }
    step_logits
        .iter()
        .zip(targets)
        .map(|(l, &t)| log_likelihood_from_logits(l, t))
        .sum()
}

pub fn phrase_nll_backward(step_logits: &[Vec<f64>], targets: &[usize], scale: f64) -> Result<Vec<Vec<f64>>> {
    step_logits
        .iter()
        .zip(targets)
        .map(|(l, &t)| Ok(log_likelihood_backward(l, t)?.into_iter().map(|g| g * scale).collect()))
        .collect()
}

/// Mean over the batch of per-phrase negative log-likelihoods.
pub fn reconstruction_loss(step_logits: &[Vec<Vec<f64>>], targets: &[Vec<usize>], batch_size: usize) -> Result<f64> {
    if step_logits.len() != targets.len() || batch_size == 0 {
        return Err(Error::Constraint(format!(
            "{} phrases of logits, {} target sequences, batch size {batch_size}",
            step_logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (l, t) in step_logits.iter().zip(targets) {
        total += phrase_nll(l, t)?;
    }
    Ok(total / batch_size as f64)
}

/// `λ·l_att + l_rec`.
pub fn combined_loss(l_att: f64, l_rec: f64, lambda: f64) -> Result<f64> {
    let w = LossWeights::new(lambda)?;
    Ok(w.lambda * l_att + l_rec)
}
