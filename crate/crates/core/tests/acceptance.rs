//! One line per acceptance criterion, `PASS` or `FAIL` with the measured
//! values. Exits non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use common::*;
use grounder::attention::{score_attention, AttentionParams};
use grounder::checkpoint::Checkpoint;
use grounder::cli::{self, RunConfig};
use grounder::data::{assign_all, generate_synthetic, DatasetManifest, GroundingSample, SynthConfig, SyntheticOutput};
use grounder::eval::{iou, is_hit, phrase_set, proposal_upperbound, report, sentence_constraint_assign, ReportOptions};
use grounder::gradcheck::{self, GradcheckConfig};
use grounder::layers::{lstm_step, LstmCell};
use grounder::numerics::matmul;
use grounder::optim::{default_lambda, train, train_observed, training_set, AdamConfig, TrainConfig};
use grounder::{BBox, Mode, ModelConfig, ModelParams, Phrase, ProposalSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const IOU_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-12;
const CHANCE: f64 = 0.1;
const FULL_MIN: f64 = 0.90;
const UNSUP_MIN: f64 = 0.60;
const SEMI_FULL_SLACK: f64 = 0.02;
const NOVEL_MIN: f64 = 3.0 * CHANCE;
const RUN_BUDGET: Duration = Duration::from_secs(600);
const LEARN_SEEDS: [u64; 3] = [1, 2, 3];
const SUPERVISED_EPOCHS: usize = 10;
const UNSUP_EPOCHS: usize = 30;
const LEARNING_RATE: f64 = 0.003;
/// Relative slack for `total = λ·L_att + L_rec`: a few rounding steps.
const COMBINE_REL_TOL: f64 = 4.0 * f64::EPSILON;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::run(&GradcheckConfig {
        tolerance: GRADCHECK_TOL,
        ..GradcheckConfig::default()
    })
    .unwrap();
    let took = start.elapsed();
    let worst = checks.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let modes: HashSet<&str> = checks.iter().map(|g| g.mode.as_str()).collect();
    let failed: Vec<String> = checks
        .iter()
        .filter(|g| !g.passed)
        .map(|g| format!("{}/{}", g.mode, g.group))
        .collect();
    outcome(
        failed.is_empty() && modes.contains("unsup") && modes.contains("semi") && took < GRADCHECK_BUDGET,
        format!(
            "{} groups over {:?}, max rel error {worst:.2e} (< {GRADCHECK_TOL:e}), {:.1}s, failed {failed:?}",
            checks.len(),
            modes,
            took.as_secs_f64()
        ),
    )
}

fn random_box(rng: &mut impl Rng) -> [i64; 4] {
    let x0 = rng.random_range(0..23);
    let y0 = rng.random_range(0..23);
    [x0, y0, rng.random_range(x0 + 1..=24), rng.random_range(y0 + 1..=24)]
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut iou_err: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        iou_err = iou_err.max((iou(&to_bbox(a), &to_bbox(b)) - pixel_iou(a, b)).abs());
    }

    let (mut mm, mut ls, mut sc): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..300 {
        let (n, k, m) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = random_tensor(&mut rng, &[n, k]);
        let b = random_tensor(&mut rng, &[k, m]);
        mm = mm.max(max_abs_diff(matmul(&a, &b).unwrap().data(), &naive_matmul(&a, &b)));

        let mut cell = LstmCell::new(k, m, 0.8, &mut rng);
        cell.bias = random_tensor(&mut rng, &[4 * m]);
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (h1, c1) = lstm_step(&cell, &x, &h, &c).unwrap();
        let (h2, c2) = scalar_lstm_step(&cell, &x, &h, &c);
        ls = ls.max(max_abs_diff(&h1, &h2)).max(max_abs_diff(&c1, &c2));

        let mut p = AttentionParams::new(m, k, n, &mut rng);
        p.b1 = random_tensor(&mut rng, &[n]);
        p.b2 = random_tensor(&mut rng, &[1]);
        let feats = random_tensor(&mut rng, &[n, k]);
        let boxes = (0..n).map(|i| to_bbox([i as i64, 0, i as i64 + 1, 1])).collect();
        let s = score_attention(&p, &h, &ProposalSet::new(boxes, feats.clone()).unwrap()).unwrap();
        sc = sc.max(max_abs_diff(&s, &naive_scores(&p, &h, &feats)));
    }

    let (mut instances, mut mismatches, mut collisions) = (0, 0, 0);
    for b in 1..=6 {
        for p in 1..=b {
            for trial in 0..200 {
                let scores: Vec<Vec<f64>> = (0..p)
                    .map(|_| {
                        (0..b)
                            .map(|_| if trial % 2 == 0 { rng.random_range(0..3) as f64 } else { rng.random() })
                            .collect()
                    })
                    .collect();
                let got = sentence_constraint_assign(&scores).unwrap();
                instances += 1;
                mismatches += (got != greedy_replay(&scores)) as usize;
                collisions += (got.iter().collect::<HashSet<_>>().len() != got.len()) as usize;
            }
        }
    }
    outcome(
        iou_err <= IOU_TOL && mm <= ORACLE_TOL && ls <= ORACLE_TOL && sc <= ORACLE_TOL && mismatches == 0 && collisions == 0,
        format!(
            "iou {iou_err:.1e}, matmul {mm:.1e}, lstm {ls:.1e}, scores {sc:.1e}; constraint {instances} instances, {mismatches} mismatches, {collisions} reused boxes"
        ),
    )
}

struct Task {
    train: SyntheticOutput,
    val: SyntheticOutput,
}

fn task(seed: u64) -> Task {
    let base = SynthConfig {
        world_seed: seed,
        ..SynthConfig::default()
    };
    Task {
        train: generate_synthetic(&SynthConfig {
            samples: 2000,
            seed: seed * 10 + 1,
            ..base.clone()
        })
        .unwrap(),
        val: generate_synthetic(&SynthConfig {
            samples: 500,
            seed: seed * 10 + 2,
            split: "val".into(),
            ..base
        })
        .unwrap(),
    }
}

struct Run {
    accuracy: f64,
    took: Duration,
    model: ModelParams,
}

fn learn(t: &Task, mode: Mode, fraction: f64, epochs: usize, seed: u64) -> Run {
    let tc = TrainConfig {
        mode,
        supervision_fraction: fraction,
        epochs,
        seed,
        adam: AdamConfig {
            lr: LEARNING_RATE,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let model = ModelParams::new(
        ModelConfig {
            vocab_size: t.train.manifest.vocab_size,
            feature_dim: t.train.manifest.feature_dim,
            embed_dim: 32,
            hidden_dim: 64,
            attention_dim: 64,
            batchnorm: tc.resolved_batchnorm(),
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap();
    let start = Instant::now();
    let data = training_set(&t.train.manifest, &tc).unwrap();
    let out = train(&data, Some(&t.val.manifest), &tc, model).unwrap();
    let accuracy = report(&t.val.manifest, &out.model, &ReportOptions::default()).unwrap().overall_accuracy;
    Run {
        accuracy,
        took: start.elapsed(),
        model: out.model,
    }
}

struct SeedResult {
    seed: u64,
    full: Run,
    unsup: Run,
    semi25: Run,
    full25: Run,
    semi100: Run,
    task: Task,
}

impl SeedResult {
    fn runs(&self) -> [&Run; 5] {
        [&self.full, &self.unsup, &self.semi25, &self.full25, &self.semi100]
    }

    fn learnable(&self) -> bool {
        self.full.accuracy >= FULL_MIN
            && self.unsup.accuracy >= UNSUP_MIN
            && self.unsup.accuracy >= 5.0 * CHANCE
            && self.semi25.accuracy >= self.full25.accuracy
            && self.semi100.accuracy >= self.full.accuracy - SEMI_FULL_SLACK
            && self.runs().iter().all(|r| r.took < RUN_BUDGET)
    }
}

fn learn_seed(seed: u64) -> SeedResult {
    let task = task(seed);
    SeedResult {
        seed,
        full: learn(&task, Mode::FullySupervised, 1.0, SUPERVISED_EPOCHS, seed),
        unsup: learn(&task, Mode::Unsupervised, 0.0, UNSUP_EPOCHS, seed),
        semi25: learn(&task, Mode::SemiSupervised, 0.25, SUPERVISED_EPOCHS, seed),
        full25: learn(&task, Mode::FullySupervised, 0.25, SUPERVISED_EPOCHS, seed),
        semi100: learn(&task, Mode::SemiSupervised, 1.0, SUPERVISED_EPOCHS, seed),
        task,
    }
}

fn synthetic_learnability(results: &[SeedResult]) -> Outcome {
    let detail: Vec<String> = results
        .iter()
        .map(|r| {
            let slowest = r.runs().iter().map(|x| x.took).max().unwrap();
            format!(
                "seed {}: full {:.3} unsup {:.3} semi25 {:.3} full25 {:.3} semi100 {:.3} (slowest {:.0}s) {}",
                r.seed,
                r.full.accuracy,
                r.unsup.accuracy,
                r.semi25.accuracy,
                r.full25.accuracy,
                r.semi100.accuracy,
                slowest.as_secs_f64(),
                if r.learnable() { "ok" } else { "miss" }
            )
        })
        .collect();
    let holding = results.iter().filter(|r| r.learnable()).count();
    outcome(holding >= 2, format!("{holding}/3 seeds hold; {}", detail.join("; ")))
}

fn one_box_sample(id: usize, gt: BBox, proposal: BBox) -> GroundingSample {
    GroundingSample {
        image_id: format!("img{id}"),
        proposals: ProposalSet::new(vec![proposal], Tensor::zeros(&[1, 2])).unwrap(),
        phrases: vec![Phrase {
            tokens: vec![3],
            sentence_id: id as u64,
            phrase_type: None,
            gt_box: Some(gt),
            gt_attention: None,
        }],
    }
}

fn protocol_fidelity() -> Outcome {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let far = BBox::new(50.0, 50.0, 60.0, 60.0).unwrap();
    let mut hand = DatasetManifest {
        split: "val".into(),
        vocab_file: "vocab.txt".into(),
        vocab_size: 4,
        feature_dim: 2,
        samples: (0..10).map(|i| one_box_sample(i, gt, if i < 8 { gt } else { far })).collect(),
    };
    assign_all(&mut hand);
    let hand_bound = proposal_upperbound(&hand);

    let synth = (100..200)
        .map(|samples| {
            generate_synthetic(&SynthConfig {
                samples,
                plant_rate: 0.8,
                ..SynthConfig::default()
            })
            .unwrap()
            .manifest
        })
        .find(|m| m.phrase_count() % 5 == 0)
        .unwrap();
    let synth_bound = proposal_upperbound(&synth);

    let half = BBox::new(0.0, 0.0, 2.0, 1.0).unwrap();
    let left = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let exactly_half = iou(&half, &left);
    let mut edge = DatasetManifest {
        samples: vec![one_box_sample(0, half, left)],
        ..hand.clone()
    };
    assign_all(&mut edge);
    outcome(
        hand_bound == 0.8 && synth_bound == 0.8 && exactly_half == 0.5 && !is_hit(&left, &half) && proposal_upperbound(&edge) == 0.0,
        format!(
            "upper bound {hand_bound} (10 phrases), {synth_bound} ({} synthetic phrases); IoU 0.5 case counted as {}",
            synth.phrase_count(),
            if is_hit(&left, &half) { "hit" } else { "miss" }
        ),
    )
}

fn novel_phrases(results: &[SeedResult]) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for r in results {
        let t = &r.task;
        let seen = phrase_set(&t.train.manifest);
        let held: HashSet<Vec<usize>> = t.train.world.held_out_phrases().into_iter().collect();
        let expected = t
            .val
            .manifest
            .samples
            .iter()
            .flat_map(|s| &s.phrases)
            .filter(|p| held.contains(&p.tokens))
            .count();
        let unseen_are_held = t
            .val
            .manifest
            .samples
            .iter()
            .flat_map(|s| &s.phrases)
            .all(|p| seen.contains(&p.tokens) != held.contains(&p.tokens));
        let rep = report(
            &t.val.manifest,
            &r.full.model,
            &ReportOptions {
                sentence_constraint: false,
                training_phrases: Some(&seen),
            },
        )
        .unwrap();
        let novel = rep.novel.unwrap();
        let pass = novel.count == expected && expected > 0 && unseen_are_held && novel.accuracy >= NOVEL_MIN;
        ok &= pass;
        detail.push(format!(
            "seed {}: {} novel of {expected} held-out, accuracy {:.3}",
            r.seed, novel.count, novel.accuracy
        ));
    }
    outcome(ok, format!("{} (min {NOVEL_MIN:.2})", detail.join("; ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let make = |run: &str| {
        RunConfig::from_parts(
            None,
            &[
                format!("paths.data_dir={}", data.display()),
                format!("paths.train={}", data.join("train.jsonl").display()),
                format!("paths.val={}", data.join("val.jsonl").display()),
                format!("paths.run_dir={}", dir.path().join(run).display()),
                "splits.train=300".into(),
                "splits.val=100".into(),
                "splits.test=10".into(),
                "train.epochs=3".into(),
                "model.hidden_dim=16".into(),
                "model.attention_dim=16".into(),
                "model.embed_dim=8".into(),
            ],
        )
        .unwrap()
    };
    let (a, b) = (make("a"), make("b"));
    cli::cmd_synth(&a).unwrap();
    cli::cmd_train(&a).unwrap();
    cli::cmd_train(&b).unwrap();
    let read = |run: &str, f: &str| std::fs::read(dir.path().join(run).join(f)).unwrap();
    let metrics_same = read("a", cli::METRICS_FILE) == read("b", cli::METRICS_FILE);
    let bitwise = |x: &ModelParams, y: &ModelParams| {
        x.tensors()
            .iter()
            .zip(y.tensors())
            .all(|((_, p), (_, q))| p.shape() == q.shape() && p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()))
    };
    let load = |run: &str| Checkpoint::load(&dir.path().join(run).join(cli::CHECKPOINT_FILE)).unwrap();
    // the headers differ only by the echoed run directory
    let params_same = bitwise(&load("a").model, &load("b").model);

    let bytes = read("a", cli::CHECKPOINT_FILE);
    let loaded = Checkpoint::from_bytes(&bytes, &dir.path().join("a")).unwrap();
    let again = loaded.to_bytes();
    let path = dir.path().join("copy.bin");
    loaded.save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    let params_exact = bitwise(&loaded.model, &reloaded.model) && reloaded.to_bytes() == bytes;
    outcome(
        metrics_same && params_same && again == bytes && params_exact,
        format!(
            "metrics identical {metrics_same}, parameters identical {params_same}, round trip {} bytes exact {}",
            bytes.len(),
            again == bytes && params_exact
        ),
    )
}

fn lambda_semantics() -> Outcome {
    let (a, b) = (default_lambda(0.0312), default_lambda(0.125));
    let t = task(4);
    let tc = TrainConfig {
        mode: Mode::SemiSupervised,
        supervision_fraction: 0.125,
        epochs: 1,
        ..TrainConfig::default()
    };
    let model = ModelParams::new(
        ModelConfig {
            vocab_size: t.train.manifest.vocab_size,
            feature_dim: t.train.manifest.feature_dim,
            embed_dim: 8,
            hidden_dim: 16,
            attention_dim: 16,
            batchnorm: true,
            ..ModelConfig::default()
        },
        4,
    )
    .unwrap();
    let data = training_set(&t.train.manifest, &tc).unwrap();
    let (mut batches, mut worst, mut lambdas) = (0, 0.0f64, HashSet::new());
    train_observed(&data, None, &tc, model, |log| {
        let l = &log.losses;
        let combined = log.lambda * l.l_att.unwrap_or(0.0) + l.l_rec.unwrap();
        let total = l.total.unwrap();
        worst = worst.max((total - combined).abs() / total.abs().max(1.0));
        lambdas.insert(log.lambda.to_bits());
        batches += 1;
    })
    .unwrap();
    let used = f64::from_bits(*lambdas.iter().next().unwrap());
    outcome(
        a == 200.0 && b == 50.0 && lambdas.len() == 1 && used == 50.0 && worst <= COMBINE_REL_TOL,
        format!("λ(0.0312) = {a}, λ(0.125) = {b}; {batches} logged batches at λ {used}, worst relative gap {worst:.1e}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut line = |name: &str, o: Outcome| {
        failed += !o.passed as usize;
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    line("gradient integrity", gradient_integrity());
    line("oracle equivalences", oracle_equivalences());
    let results: Vec<SeedResult> = LEARN_SEEDS.iter().map(|&s| learn_seed(s)).collect();
    line("synthetic learnability", synthetic_learnability(&results));
    line("protocol fidelity", protocol_fidelity());
    line("novel-phrase evaluation", novel_phrases(&results));
    line("determinism", determinism());
    line("lambda semantics", lambda_semantics());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
