//! Datasets: samples of proposals with their phrases, on-disk manifests,
//! vocabularies, supervision masking and the synthetic task generator.

mod manifest;
mod synth;
mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use manifest::{load_manifest, save_manifest, features_path, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use synth::{generate_synthetic, SynthConfig, SyntheticOutput, SyntheticWorld, PHRASE_TYPES};
pub use vocab::{build_vocab, Vocabulary, RESERVED_TOKENS};

use crate::attention::{BBox, Phrase, ProposalSet};
use crate::error::{Error, Result};
use crate::eval::{iou, IOU_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub image_id: String,
    pub proposals: ProposalSet,
    pub phrases: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    /// Vocabulary file, relative to the manifest's directory.
    pub vocab_file: String,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub samples: Vec<GroundingSample>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.proposals.feature_dim() != self.feature_dim {
                return Err(Error::Data(format!(
                    "image {} has feature width {}, manifest declares {}",
                    s.image_id,
                    s.proposals.feature_dim(),
                    self.feature_dim
                )));
            }
            for p in &s.phrases {
                if p.tokens.is_empty() {
                    return Err(Error::Data(format!("empty phrase in image {}", s.image_id)));
                }
                if let Some(&t) = p.tokens.iter().find(|&&t| t >= self.vocab_size) {
                    return Err(Error::Data(format!("token {t} outside vocabulary of {}", self.vocab_size)));
                }
                if let Some(b) = &p.gt_box {
                    b.validate()?;
                }
                if let Some(a) = p.gt_attention {
                    if a >= s.proposals.len() {
                        return Err(Error::Data(format!(
                            "gt_attention {a} outside {} proposals of image {}",
                            s.proposals.len(),
                            s.image_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn phrase_count(&self) -> usize {
        self.samples.iter().map(|s| s.phrases.len()).sum()
    }

    pub fn annotated_count(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| &s.phrases)
            .filter(|p| p.gt_attention.is_some())
            .count()
    }
}

/// Fills `gt_attention` with the proposal overlapping the ground-truth box
/// most, provided that overlap is strictly above 0.5 IoU; otherwise clears it.
/// The lowest index wins among equal overlaps.
pub fn assign_gt_attention(sample: &mut GroundingSample) {
    for phrase in &mut sample.phrases {
        phrase.gt_attention = phrase.gt_box.as_ref().and_then(|gt| {
            let mut best: Option<(usize, f64)> = None;
            for (i, b) in sample.proposals.boxes.iter().enumerate() {
                let v = iou(b, gt);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            best.filter(|&(_, v)| v > IOU_THRESHOLD).map(|(i, _)| i)
        });
    }
}

pub fn assign_all(dataset: &mut DatasetManifest) {
    dataset.samples.iter_mut().for_each(assign_gt_attention);
}

/// Smallest box containing all of `boxes`.
pub fn union_box(boxes: &[BBox]) -> Result<BBox> {
    let first = boxes.first().ok_or_else(|| Error::pre("union_box", "no boxes"))?;
    Ok(boxes.iter().skip(1).fold(*first, |acc, b| BBox {
        x_min: acc.x_min.min(b.x_min),
        y_min: acc.y_min.min(b.y_min),
        x_max: acc.x_max.max(b.x_max),
        y_max: acc.y_max.max(b.y_max),
    }))
}

/// Keeps ground-truth attention on `round(fraction · annotated)` phrases
/// chosen by a seeded permutation and removes it from the rest. The kept set
/// is a prefix of the permutation, so for one seed a smaller fraction keeps a
/// subset of what a larger one keeps.
pub fn mask_supervision(dataset: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("supervision fraction {fraction} outside [0, 1]")));
    }
    let mut annotated: Vec<(usize, usize)> = Vec::new();
    for (si, s) in dataset.samples.iter().enumerate() {
        for (pi, p) in s.phrases.iter().enumerate() {
            if p.gt_attention.is_some() {
                annotated.push((si, pi));
            }
        }
    }
    let keep = (fraction * annotated.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotated.shuffle(&mut rng);
    let mut out = dataset.clone();
    for &(si, pi) in &annotated[keep..] {
        out.samples[si].phrases[pi].gt_attention = None;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sample(boxes: Vec<BBox>, gts: Vec<Option<BBox>>) -> GroundingSample {
        let n = boxes.len();
        GroundingSample {
            image_id: "img".into(),
            proposals: ProposalSet::new(boxes, Tensor::zeros(&[n, 2])).unwrap(),
            phrases: gts
                .into_iter()
                .map(|gt| Phrase {
                    tokens: vec![3],
                    sentence_id: 0,
                    phrase_type: None,
                    gt_box: gt,
                    gt_attention: None,
                })
                .collect(),
        }
    }

    #[test]
    fn gt_assignment_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let mut s = sample(vec![b(50.0, 50.0, 60.0, 60.0), gt], vec![Some(gt)]);
        assign_gt_attention(&mut s);
        assert_eq!(s.phrases[0].gt_attention, Some(1));

        let mut s = sample(vec![b(50.0, 50.0, 60.0, 60.0)], vec![Some(gt), None]);
        assign_gt_attention(&mut s);
        assert_eq!(s.phrases[0].gt_attention, None);
        assert_eq!(s.phrases[1].gt_attention, None);

        let mut s = sample(vec![b(0.0, 0.0, 10.0, 9.0), b(0.0, 0.0, 10.0, 5.0)], vec![Some(gt)]);
        assign_gt_attention(&mut s);
        assert_eq!(s.phrases[0].gt_attention, Some(0));

        // exactly 0.5 is not enough
        let mut s = sample(vec![b(0.0, 0.0, 10.0, 5.0)], vec![Some(gt)]);
        assign_gt_attention(&mut s);
        assert_eq!(s.phrases[0].gt_attention, None);
    }

    #[test]
    fn union_examples() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(union_box(&[a]).unwrap(), a);
        assert_eq!(union_box(&[a, b(2.0, 2.0, 3.0, 3.0)]).unwrap(), b(0.0, 0.0, 3.0, 3.0));
        assert!(union_box(&[]).is_err());
    }

    fn annotated_dataset(n: usize) -> DatasetManifest {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let mut s = sample(vec![gt], vec![Some(gt); n]);
        assign_gt_attention(&mut s);
        DatasetManifest {
            split: "train".into(),
            vocab_file: "vocab.txt".into(),
            vocab_size: 4,
            feature_dim: 2,
            samples: vec![s],
        }
    }

    #[test]
    fn mask_counts() {
        let d = annotated_dataset(100);
        assert_eq!(mask_supervision(&d, 1.0, 3).unwrap(), d);
        assert_eq!(mask_supervision(&d, 0.0, 3).unwrap().annotated_count(), 0);
        assert_eq!(mask_supervision(&d, 0.5, 3).unwrap().annotated_count(), 50);
        assert!(mask_supervision(&d, 1.5, 3).is_err());
    }

    #[test]
    fn mask_is_nested_and_deterministic() {
        let d = annotated_dataset(200);
        let small = mask_supervision(&d, 0.0312, 11).unwrap();
        let large = mask_supervision(&d, 0.0625, 11).unwrap();
        assert_eq!(small, mask_supervision(&d, 0.0312, 11).unwrap());
        for (a, b) in small.samples[0].phrases.iter().zip(&large.samples[0].phrases) {
            if a.gt_attention.is_some() {
                assert!(b.gt_attention.is_some());
            }
        }
    }
}
