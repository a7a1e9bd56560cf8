//! Grounding half of the model: scores every proposal for an encoded phrase
//! with a two-layer ReLU perceptron, normalizes the scores with a softmax and
//! selects the most attended proposal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_params_with, InitScheme};
use crate::numerics::{argmax, log_likelihood_backward, log_likelihood_from_logits, softmax_stable, vecmat_backward_into, vecmat_into, Tensor};

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Data(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<usize>,
    pub sentence_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_attention: Option<usize>,
}

/// Candidate boxes of one image with one feature row per box.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub features: Tensor,
}

impl ProposalSet {
    pub fn new(boxes: Vec<BBox>, features: Tensor) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::pre("ProposalSet", "at least one proposal is required"));
        }
        if features.shape().len() != 2 || features.rows() != boxes.len() {
            return Err(Error::dim("ProposalSet", &[boxes.len()], features.shape()));
        }
        Ok(ProposalSet { boxes, features })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Attention perceptron `ᾱ_i = w2·relu(h·W_h + v_i·W_v + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_h: Tensor,
    pub w_v: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AttentionParams {
    pub fn new(phrase_dim: usize, feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            w_h: init_params_with(&[phrase_dim, hidden], InitScheme::Xavier, rng),
            w_v: init_params_with(&[feature_dim, hidden], InitScheme::Xavier, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: init_params_with(&[hidden, 1], InitScheme::Xavier, rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            w_h: self.w_h.zeros_like(),
            w_v: self.w_v.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub raw_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone)]
pub struct ScoreCache {
    /// Hidden pre-activations, one row of width k per proposal.
    pre: Vec<f64>,
}

/// Scores every row of `features` against the phrase encoding `h`.
/// The `h·W_h` term is computed once and shared across rows.
pub fn score_rows(params: &AttentionParams, h: &[f64], features: &Tensor) -> Result<(Vec<f64>, ScoreCache)> {
    let k = params.hidden();
    if h.len() != params.w_h.rows() {
        return Err(Error::dim("score_attention phrase", &[h.len()], params.w_h.shape()));
    }
    if features.cols() != params.w_v.rows() {
        return Err(Error::dim("score_attention features", features.shape(), params.w_v.shape()));
    }
    let mut shared = params.b1.data().to_vec();
    vecmat_into(h, params.w_h.data(), k, &mut shared);
    let n = features.rows();
    let mut pre = Vec::with_capacity(n * k);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = shared.clone();
        vecmat_into(features.row(i), params.w_v.data(), k, &mut z);
        let s: f64 = z
            .iter()
            .zip(params.w2.data())
            .map(|(zi, wi)| zi.max(0.0) * wi)
            .sum::<f64>()
            + params.b2.data()[0];
        scores.push(s);
        pre.extend_from_slice(&z);
    }
    Ok((scores, ScoreCache { pre }))
}

/// Backward of [`score_rows`]. Accumulates parameter gradients and returns
/// `(dh, dfeatures)`.
pub fn score_rows_backward(
    params: &AttentionParams,
    h: &[f64],
    features: &Tensor,
    cache: &ScoreCache,
    dscores: &[f64],
    grads: &mut AttentionParams,
) -> (Vec<f64>, Tensor) {
    let k = params.hidden();
    let n = features.rows();
    let mut dshared = vec![0.0; k];
    let mut dfeatures = features.zeros_like();
    let w2 = params.w2.data();
    for i in 0..n {
        let ds = dscores[i];
        grads.b2.data_mut()[0] += ds;
        if ds == 0.0 {
            continue;
        }
        let z = &cache.pre[i * k..(i + 1) * k];
        let mut dz = vec![0.0; k];
        for j in 0..k {
            if z[j] > 0.0 {
                grads.w2.data_mut()[j] += ds * z[j];
                dz[j] = ds * w2[j];
            }
        }
        for (a, b) in dshared.iter_mut().zip(&dz) {
            *a += b;
        }
        vecmat_backward_into(
            features.row(i),
            params.w_v.data(),
            k,
            &dz,
            Some(dfeatures.row_mut(i)),
            grads.w_v.data_mut(),
        );
    }
    for (a, b) in grads.b1.data_mut().iter_mut().zip(&dshared) {
        *a += b;
    }
    let mut dh = vec![0.0; h.len()];
    vecmat_backward_into(h, params.w_h.data(), k, &dshared, Some(&mut dh), grads.w_h.data_mut());
    (dh, dfeatures)
}

pub fn score_attention(params: &AttentionParams, h: &[f64], proposals: &ProposalSet) -> Result<Vec<f64>> {
    Ok(score_rows(params, h, &proposals.features)?.0)
}

pub fn normalize_and_select(raw_scores: &[f64]) -> Result<AttentionOutput> {
    let weights = softmax_stable(raw_scores)?;
    // softmax is monotone, so selecting on the raw scores avoids ties created by rounding
    let selected = argmax(raw_scores).expect("non-empty after softmax");
    Ok(AttentionOutput {
        raw_scores: raw_scores.to_vec(),
        weights,
        selected,
    })
}

/// Denominator of the attention loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// Divide by every phrase in the batch.
    #[default]
    Batch,
    /// Divide by the phrases that carry a target.
    Supervised,
}

fn loss_denominator(targets: &[Option<usize>], norm: AttentionNorm) -> f64 {
    match norm {
        AttentionNorm::Batch => targets.len() as f64,
        AttentionNorm::Supervised => targets.iter().filter(|t| t.is_some()).count().max(1) as f64,
    }
}

fn check_batch(raw_scores: &[Vec<f64>], targets: &[Option<usize>]) -> Result<()> {
    if raw_scores.is_empty() || raw_scores.len() != targets.len() {
        return Err(Error::pre(
            "attention_loss",
            format!("{} score vectors for {} targets", raw_scores.len(), targets.len()),
        ));
    }
    Ok(())
}

/// Mean negative log attention on the target proposal; phrases without a
/// target add zero to the sum but still count in the batch size.
pub fn attention_loss(raw_scores: &[Vec<f64>], targets: &[Option<usize>], norm: AttentionNorm) -> Result<f64> {
    check_batch(raw_scores, targets)?;
    let mut total = 0.0;
    for (scores, target) in raw_scores.iter().zip(targets) {
        if let Some(t) = *target {
            total += log_likelihood_from_logits(scores, t)?;
        }
    }
    Ok(total / loss_denominator(targets, norm))
}

/// Gradient of [`attention_loss`] with respect to each raw score vector.
pub fn attention_loss_backward(
    raw_scores: &[Vec<f64>],
    targets: &[Option<usize>],
    norm: AttentionNorm,
) -> Result<Vec<Vec<f64>>> {
    check_batch(raw_scores, targets)?;
    let denom = loss_denominator(targets, norm);
    raw_scores
        .iter()
        .zip(targets)
        .map(|(scores, target)| match *target {
            Some(t) => Ok(log_likelihood_backward(scores, t)?.into_iter().map(|g| g / denom).collect()),
            None => Ok(vec![0.0; scores.len()]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proposals(rows: Vec<Vec<f64>>) -> ProposalSet {
        let boxes = (0..rows.len())
            .map(|i| BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0).unwrap())
            .collect();
        ProposalSet::new(boxes, Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn constant_head_gives_constant_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = AttentionParams::new(3, 2, 4, &mut rng);
        p.w2.fill(0.0);
        p.b2.data_mut()[0] = 3.0;
        let s = score_attention(&p, &[0.1, 0.2, 0.3], &proposals(vec![vec![1.0, 2.0], vec![-1.0, 0.5]])).unwrap();
        assert_eq!(s, vec![3.0, 3.0]);
    }

    #[test]
    fn identical_features_give_identical_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::new(3, 2, 4, &mut rng);
        let s = score_attention(&p, &[0.5, -0.2, 0.3], &proposals(vec![vec![0.7, -0.4]; 3])).unwrap();
        assert!(s.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::new(3, 2, 4, &mut rng);
        assert!(matches!(
            score_attention(&p, &[0.5, -0.2], &proposals(vec![vec![0.7, -0.4]])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            score_attention(&p, &[0.5, -0.2, 0.1], &proposals(vec![vec![0.7, -0.4, 0.0]])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn selection_rules() {
        assert_eq!(normalize_and_select(&[2.0, 2.0]).unwrap().selected, 0);
        assert_eq!(normalize_and_select(&[0.1, 5.0, -3.0]).unwrap().selected, 1);
    }

    #[test]
    fn loss_examples() {
        let uniform = vec![0.0; 4];
        let l = attention_loss(&[uniform.clone(), uniform.clone()], &[Some(1), Some(3)], AttentionNorm::Batch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = attention_loss(&[uniform.clone(), uniform.clone()], &[None, None], AttentionNorm::Batch).unwrap();
        assert_eq!(l, 0.0);
        let half = vec![0.0, 0.0];
        let l = attention_loss(&[half.clone(), uniform.clone()], &[Some(0), None], AttentionNorm::Batch).unwrap();
        assert!((l - 2f64.ln() / 2.0).abs() < 1e-12);
        let l = attention_loss(&[half, uniform], &[Some(0), None], AttentionNorm::Supervised).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_input() {
        assert!(matches!(
            attention_loss(&[vec![0.0; 2]], &[Some(2)], AttentionNorm::Batch),
            Err(Error::Index { .. })
        ));
        assert!(attention_loss(&[], &[], AttentionNorm::Batch).is_err());
    }

    #[test]
    fn absent_targets_get_zero_gradient() {
        let g = attention_loss_backward(&[vec![0.3, -1.0], vec![2.0, 0.1]], &[None, Some(0)], AttentionNorm::Batch).unwrap();
        assert_eq!(g[0], vec![0.0, 0.0]);
        assert!(g[1].iter().any(|v| *v != 0.0));
    }
}
