//! Evaluation protocol: a phrase counts as grounded when the selected box
//! overlaps its ground-truth box with IoU strictly above 0.5.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::BBox;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{BatchItem, ModelParams};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Phrases grounded per forward call during evaluation.
const EVAL_BATCH: usize = 256;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

pub fn is_hit(selected: &BBox, gt: &BBox) -> bool {
    iou(selected, gt) > IOU_THRESHOLD
}

/// Fraction of `(selected, ground truth)` pairs with IoU > 0.5.
pub fn grounding_accuracy(predictions: &[(BBox, BBox)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::pre("grounding_accuracy", "no predictions"));
    }
    let hits = predictions.iter().filter(|(s, g)| is_hit(s, g)).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of phrases with a ground-truth box for which some proposal has
/// IoU > 0.5 with it: the best accuracy any selection rule can reach.
pub fn proposal_upperbound(dataset: &DatasetManifest) -> f64 {
    let mut total = 0usize;
    let mut covered = 0usize;
    for sample in &dataset.samples {
        for phrase in &sample.phrases {
            if let Some(gt) = &phrase.gt_box {
                total += 1;
                if sample.proposals.boxes.iter().any(|b| is_hit(b, gt)) {
                    covered += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// Greedy one-box-per-phrase assignment for the phrases of one sentence.
///
/// Repeatedly takes the highest remaining score among unassigned phrases and
/// unused boxes. Ties go to the lower phrase index, then the lower box index.
pub fn sentence_constraint_assign(scores: &[Vec<f64>]) -> Result<Vec<usize>> {
    let Some(first) = scores.first() else {
        return Ok(Vec::new());
    };
    let n_boxes = first.len();
    if scores.iter().any(|s| s.len() != n_boxes) {
        return Err(Error::Constraint("phrases of one sentence must share the proposal set".into()));
    }
    if scores.len() > n_boxes {
        return Err(Error::Constraint(format!(
            "{} phrases cannot take distinct boxes among {n_boxes} proposals",
            scores.len()
        )));
    }
    let mut assigned: Vec<Option<usize>> = vec![None; scores.len()];
    let mut used = vec![false; n_boxes];
    for _ in 0..scores.len() {
        let mut best: Option<(usize, usize, f64)> = None;
        for (p, row) in scores.iter().enumerate() {
            if assigned[p].is_some() {
                continue;
            }
            for (b, &s) in row.iter().enumerate() {
                if used[b] {
                    continue;
                }
                // strict comparison keeps the earliest (phrase, box) on ties
                if best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((p, b, s));
                }
            }
        }
        let (p, b, _) = best.expect("a free phrase and box remain");
        assigned[p] = Some(b);
        used[b] = true;
    }
    Ok(assigned.into_iter().map(|a| a.expect("all assigned")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub overall_accuracy: f64,
    pub evaluated: usize,
    pub per_type: BTreeMap<String, GroupStats>,
    /// Phrases whose token sequence never occurs in the training set.
    pub novel: Option<GroupStats>,
    pub proposal_upperbound: f64,
    pub sentence_constraint: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions<'a> {
    pub sentence_constraint: bool,
    /// Token sequences seen in training; enables the novel-phrase row.
    pub training_phrases: Option<&'a HashSet<Vec<usize>>>,
}

#[derive(Default)]
struct Tally {
    hits: usize,
    count: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.hits += hit as usize;
    }

    fn stats(&self) -> GroupStats {
        GroupStats {
            accuracy: if self.count == 0 {
                0.0
            } else {
                self.hits as f64 / self.count as f64
            },
            count: self.count,
        }
    }
}

pub const UNTYPED: &str = "untyped";

/// Grounds every phrase that has a ground-truth box and aggregates accuracy
/// overall, per phrase type, and over novel phrases.
pub fn report(dataset: &DatasetManifest, model: &ModelParams, options: &ReportOptions) -> Result<EvalReport> {
    let mut refs: Vec<(usize, usize)> = Vec::new();
    for (si, sample) in dataset.samples.iter().enumerate() {
        for (pi, phrase) in sample.phrases.iter().enumerate() {
            if phrase.gt_box.is_some() {
                refs.push((si, pi));
            }
        }
    }
    if refs.is_empty() {
        return Err(Error::Data(format!("split {:?} has no phrases with ground truth", dataset.split)));
    }

    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(refs.len());
    let mut selected: Vec<usize> = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(EVAL_BATCH) {
        let items: Vec<BatchItem> = chunk
            .iter()
            .map(|&(si, pi)| BatchItem {
                phrase: &dataset.samples[si].phrases[pi],
                proposals: &dataset.samples[si].proposals,
            })
            .collect();
        for out in model.ground(&items)? {
            selected.push(out.selected);
            scores.push(out.raw_scores);
        }
    }

    if options.sentence_constraint {
        let mut groups: BTreeMap<(usize, u64), Vec<usize>> = BTreeMap::new();
        for (k, &(si, pi)) in refs.iter().enumerate() {
            let sid = dataset.samples[si].phrases[pi].sentence_id;
            groups.entry((si, sid)).or_default().push(k);
        }
        for members in groups.values() {
            if members.len() < 2 {
                continue;
            }
            let group_scores: Vec<Vec<f64>> = members.iter().map(|&k| scores[k].clone()).collect();
            for (&k, b) in members.iter().zip(sentence_constraint_assign(&group_scores)?) {
                selected[k] = b;
            }
        }
    }

    let mut overall = Tally::default();
    let mut per_type: BTreeMap<String, Tally> = BTreeMap::new();
    let mut novel = Tally::default();
    for (k, &(si, pi)) in refs.iter().enumerate() {
        let sample = &dataset.samples[si];
        let phrase = &sample.phrases[pi];
        let gt = phrase.gt_box.as_ref().expect("filtered above");
        let hit = is_hit(&sample.proposals.boxes[selected[k]], gt);
        overall.add(hit);
        per_type
            .entry(phrase.phrase_type.clone().unwrap_or_else(|| UNTYPED.to_string()))
            .or_default()
            .add(hit);
        if let Some(seen) = options.training_phrases {
            if !seen.contains(&phrase.tokens) {
                novel.add(hit);
            }
        }
    }

    Ok(EvalReport {
        split: dataset.split.clone(),
        overall_accuracy: overall.stats().accuracy,
        evaluated: overall.count,
        per_type: per_type.into_iter().map(|(k, v)| (k, v.stats())).collect(),
        novel: options.training_phrases.map(|_| novel.stats()),
        proposal_upperbound: proposal_upperbound(dataset),
        sentence_constraint: options.sentence_constraint,
    })
}

impl EvalReport {
    /// One row per group: `group,accuracy,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,accuracy,count\n");
        let _ = writeln!(out, "overall,{},{}", self.overall_accuracy, self.evaluated);
        for (name, s) in &self.per_type {
            let _ = writeln!(out, "type:{name},{},{}", s.accuracy, s.count);
        }
        if let Some(s) = &self.novel {
            let _ = writeln!(out, "novel,{},{}", s.accuracy, s.count);
        }
        let _ = writeln!(out, "proposal_upperbound,{},{}", self.proposal_upperbound, self.evaluated);
        out
    }
}

/// Set of token sequences in a split, for novel-phrase detection.
pub fn phrase_set(dataset: &DatasetManifest) -> HashSet<Vec<usize>> {
    dataset
        .samples
        .iter()
        .flat_map(|s| s.phrases.iter().map(|p| p.tokens.clone()))
        .collect()
}
