//! Synthetic grounding task with a known answer.
//!
//! A *world* fixes `concepts` latent feature prototypes. Every concept has a
//! unique head word and two modifier words, and is named by four variants:
//! `head`, `mod1 head`, `mod2 head` and `mod1 mod2 head`. Some multi-word
//! variants are held out of the training split so that evaluation can measure
//! transfer to phrases never seen in training.
//!
//! Each image places `proposals` boxes in distinct cells of a grid (so no two
//! proposals overlap), each showing one concept with feature
//! `prototype + noise·N(0, I)`. One to three of the proposals are described by
//! a phrase whose ground-truth box is that proposal's box. The grid has an
//! extra, empty bottom row where the ground truth of "unplanted" phrases is
//! put, which gives those phrases no proposal above 0.5 IoU.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{assign_gt_attention, build_vocab, DatasetManifest, GroundingSample, Vocabulary};
use crate::attention::{BBox, Phrase, ProposalSet};
use crate::error::{Error, Result};
use crate::layers::NUM_RESERVED;
use crate::numerics::Tensor;

/// Phrase categories, assigned to concepts round-robin.
pub const PHRASE_TYPES: [&str; 8] = [
    "people",
    "clothing",
    "bodyparts",
    "animals",
    "vehicles",
    "instruments",
    "scene",
    "other",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub concepts: usize,
    pub vocab_size: usize,
    pub proposals: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub samples: usize,
    pub split: String,
    /// Seed of the per-image draws.
    pub seed: u64,
    /// Seed of the world: prototypes, names and held-out names.
    pub world_seed: u64,
    pub held_out_names: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub cell_size: f64,
    /// Fraction of phrases whose ground truth coincides with a proposal.
    pub plant_rate: f64,
    /// Keep held-out names out of this split. Defaults to `split == "train"`.
    pub exclude_held_out: Option<bool>,
    pub vocab_file: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            concepts: 20,
            vocab_size: 63,
            proposals: 10,
            feature_dim: 16,
            noise: 0.3,
            samples: 2000,
            split: "train".into(),
            seed: 1,
            world_seed: 7,
            held_out_names: 4,
            min_phrases: 1,
            max_phrases: 3,
            grid_cols: 5,
            grid_rows: 2,
            cell_size: 100.0,
            plant_rate: 1.0,
            exclude_held_out: None,
            vocab_file: "vocab.txt".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.concepts == 0 || self.proposals == 0 || self.feature_dim == 0 || self.samples == 0 {
            return err("concepts, proposals, feature_dim and samples must be positive".into());
        }
        if self.proposals > self.grid_cols * self.grid_rows {
            return err(format!(
                "{} proposals exceed grid capacity {}x{}",
                self.proposals, self.grid_cols, self.grid_rows
            ));
        }
        if self.vocab_size < NUM_RESERVED + self.concepts + 2 {
            return err(format!(
                "vocab_size {} too small for {} concepts (need at least {})",
                self.vocab_size,
                self.concepts,
                NUM_RESERVED + self.concepts + 2
            ));
        }
        if self.held_out_names > self.concepts {
            return err("more held-out names than concepts".into());
        }
        if self.min_phrases == 0 || self.min_phrases > self.max_phrases {
            return err("need 1 <= min_phrases <= max_phrases".into());
        }
        if !(0.0..=1.0).contains(&self.plant_rate) || !(self.noise >= 0.0) || !(self.cell_size > 0.0) {
            return err("plant_rate must lie in [0, 1]; noise and cell_size must be non-negative".into());
        }
        Ok(())
    }

    fn excludes_held_out(&self) -> bool {
        self.exclude_held_out.unwrap_or(self.split == "train")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub prototypes: Vec<Vec<f64>>,
    /// Name variants per concept, as token ids.
    pub names: Vec<Vec<Vec<usize>>>,
    /// `(concept, variant)` pairs kept out of training.
    pub held_out: Vec<(usize, usize)>,
    pub vocab: Vocabulary,
}

impl SyntheticWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let prototypes: Vec<Vec<f64>> = (0..cfg.concepts)
            .map(|_| (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();

        let heads: Vec<String> = (0..cfg.concepts).map(|c| format!("obj{c:02}")).collect();
        let n_mods = cfg.vocab_size - NUM_RESERVED - cfg.concepts;
        let mut mods: Vec<String> = (0..n_mods).map(|m| format!("mod{m:02}")).collect();
        mods.shuffle(&mut rng);
        let words: Vec<[String; 3]> = (0..cfg.concepts)
            .map(|c| {
                [
                    mods[(2 * c) % n_mods].clone(),
                    mods[(2 * c + 1) % n_mods].clone(),
                    heads[c].clone(),
                ]
            })
            .collect();

        let corpus: Vec<Vec<&str>> = heads
            .iter()
            .map(|h| vec![h.as_str()])
            .chain(mods.iter().map(|m| vec![m.as_str()]))
            .collect();
        let vocab = build_vocab(&corpus, 1);

        let names = words
            .iter()
            .map(|[m1, m2, h]| {
                vec![
                    vocab.encode(&[h]),
                    vocab.encode(&[m1, h]),
                    vocab.encode(&[m2, h]),
                    vocab.encode(&[m1, m2, h]),
                ]
            })
            .collect();

        let mut concept_order: Vec<usize> = (0..cfg.concepts).collect();
        concept_order.shuffle(&mut rng);
        let held_out = concept_order[..cfg.held_out_names]
            .iter()
            .map(|&c| (c, rng.random_range(1..4)))
            .collect();

        Ok(SyntheticWorld {
            prototypes,
            names,
            held_out,
            vocab,
        })
    }

    pub fn held_out_phrases(&self) -> Vec<Vec<usize>> {
        self.held_out.iter().map(|&(c, v)| self.names[c][v].clone()).collect()
    }

    /// Concept named by a phrase, identified by its final (head) token.
    pub fn concept_of(&self, tokens: &[usize]) -> Option<usize> {
        let head = *tokens.last()?;
        self.names.iter().position(|variants| variants[0][0] == head)
    }

    /// Proposal whose feature is closest to the prototype of `concept`.
    pub fn nearest_prototype(&self, concept: usize, features: &Tensor) -> usize {
        let proto = &self.prototypes[concept];
        let dist = |i: usize| -> f64 { features.row(i).iter().zip(proto).map(|(a, b)| (a - b) * (a - b)).sum() };
        (0..features.rows())
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)))
            .expect("at least one proposal")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub world: SyntheticWorld,
}

fn cell_box(rng: &mut impl Rng, col: usize, row: usize, size: f64) -> BBox {
    let (ox, oy) = (col as f64 * size, row as f64 * size);
    let m = 0.2 * size;
    BBox {
        x_min: ox + rng.random_range(0.0..m),
        y_min: oy + rng.random_range(0.0..m),
        x_max: ox + size - rng.random_range(0.0..m),
        y_max: oy + size - rng.random_range(0.0..m),
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticOutput> {
    let world = SyntheticWorld::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exclude = cfg.excludes_held_out();
    let n = cfg.proposals;
    let mut samples = Vec::with_capacity(cfg.samples);

    for s in 0..cfg.samples {
        let concepts: Vec<usize> = if cfg.concepts >= n {
            let mut all: Vec<usize> = (0..cfg.concepts).collect();
            all.partial_shuffle(&mut rng, n).0.to_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..cfg.concepts)).collect()
        };
        let mut cells: Vec<usize> = (0..cfg.grid_cols * cfg.grid_rows).collect();
        let cells = cells.partial_shuffle(&mut rng, n).0.to_vec();
        let boxes: Vec<BBox> = cells
            .iter()
            .map(|&cell| cell_box(&mut rng, cell % cfg.grid_cols, cell / cfg.grid_cols, cfg.cell_size))
            .collect();
        let mut feats = Vec::with_capacity(n * cfg.feature_dim);
        for &c in &concepts {
            for &mu in &world.prototypes[c] {
                let eps: f64 = rng.sample(StandardNormal);
                feats.push(mu + cfg.noise * eps);
            }
        }

        let unique: Vec<usize> = (0..n)
            .filter(|&i| concepts.iter().filter(|&&c| c == concepts[i]).count() == 1)
            .collect();
        let k = rng.random_range(cfg.min_phrases..=cfg.max_phrases).min(unique.len());
        let chosen: Vec<usize> = unique.choose_multiple(&mut rng, k).copied().collect();
        let phrases = chosen
            .into_iter()
            .map(|i| {
                let c = concepts[i];
                let allowed: Vec<usize> = (0..4)
                    .filter(|&v| !(exclude && world.held_out.contains(&(c, v))))
                    .collect();
                let v = *allowed.choose(&mut rng).expect("the bare head is never held out");
                Phrase {
                    tokens: world.names[c][v].clone(),
                    sentence_id: s as u64,
                    phrase_type: Some(PHRASE_TYPES[c % PHRASE_TYPES.len()].to_string()),
                    gt_box: Some(boxes[i]),
                    gt_attention: None,
                }
            })
            .collect();

        samples.push(GroundingSample {
            image_id: format!("{}-{s:06}", cfg.split),
            proposals: ProposalSet::new(boxes, Tensor::new(vec![n, cfg.feature_dim], feats)?)?,
            phrases,
        });
    }

    // move the ground truth of exactly (1 - plant_rate) of the phrases to the empty row
    let mut refs: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.phrases.len()).map(move |pi| (si, pi)))
        .collect();
    let planted = (cfg.plant_rate * refs.len() as f64).round() as usize;
    refs.shuffle(&mut rng);
    for &(si, pi) in &refs[planted..] {
        let col = rng.random_range(0..cfg.grid_cols);
        samples[si].phrases[pi].gt_box = Some(cell_box(&mut rng, col, cfg.grid_rows, cfg.cell_size));
    }
    samples.iter_mut().for_each(assign_gt_attention);

    let manifest = DatasetManifest {
        split: cfg.split.clone(),
        vocab_file: cfg.vocab_file.clone(),
        vocab_size: world.vocab.len(),
        feature_dim: cfg.feature_dim,
        samples,
    };
    manifest.validate()?;
    if cfg.noise == 0.0 {
        self_check(&world, &manifest)?;
    }
    Ok(SyntheticOutput {
        vocab: world.vocab.clone(),
        manifest,
        world,
    })
}

/// With noiseless features every planted phrase is grounded exactly by
/// matching its concept's prototype.
fn self_check(world: &SyntheticWorld, manifest: &DatasetManifest) -> Result<()> {
    for s in &manifest.samples {
        for p in &s.phrases {
            let Some(target) = p.gt_attention else { continue };
            let concept = world
                .concept_of(&p.tokens)
                .ok_or_else(|| Error::Data(format!("phrase {:?} names no concept", p.tokens)))?;
            if world.nearest_prototype(concept, &s.proposals.features) != target {
                return Err(Error::Data(format!("nearest-prototype oracle fails on image {}", s.image_id)));
            }
        }
    }
    Ok(())
}
