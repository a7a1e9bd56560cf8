use std::collections::HashSet;

use grounder::data::{generate_synthetic, load_manifest, save_manifest, DatasetManifest, SynthConfig};
use grounder::eval::{is_hit, proposal_upperbound, report, ReportOptions};
use grounder::layers::{BnMode, UNK_ID};
use grounder::model::{full_forward, Losses};
use grounder::optim::{train, train_observed, training_set, AdamConfig, TrainConfig};
use grounder::reconstruction::{aggregate_visual, encode_visual, decode_phrase_logits, phrase_nll, targets_with_eos};
use grounder::{BatchItem, Error, Mode, ModelConfig, ModelParams, Objective, ProposalSet, Tensor};

fn small_task(samples: usize, seed: u64, split: &str) -> grounder::data::SyntheticOutput {
    generate_synthetic(&SynthConfig {
        samples,
        seed,
        split: split.into(),
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_model(data: &DatasetManifest, batchnorm: bool, seed: u64) -> ModelParams {
    ModelParams::new(
        ModelConfig {
            vocab_size: data.vocab_size,
            feature_dim: data.feature_dim,
            embed_dim: 8,
            hidden_dim: 12,
            attention_dim: 12,
            batchnorm,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn one_hot_attention_reconstructs_like_a_single_box() {
    let data = small_task(3, 1, "train").manifest;
    let model = small_model(&data, false, 2);
    let sample = &data.samples[0];
    let phrase = &sample.phrases[0];
    let targets = targets_with_eos(&phrase.tokens);
    let n = sample.proposals.len();
    for i in 0..n {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        let pooled = aggregate_visual(&w, &sample.proposals.features).unwrap();
        let nll_pooled = phrase_nll(
            &decode_phrase_logits(&model.decoder, model.dec_embed(), &encode_visual(&model.rec_encoder, &pooled).unwrap(), &phrase.tokens).unwrap(),
            &targets,
        )
        .unwrap();

        let single = ProposalSet::new(
            vec![sample.proposals.boxes[i]],
            Tensor::from_rows(&[sample.proposals.features.row(i).to_vec()]).unwrap(),
        )
        .unwrap();
        let mut p = phrase.clone();
        p.gt_attention = None;
        let objective = Objective {
            mode: Mode::Unsupervised,
            lambda: 0.0,
            att_norm: Default::default(),
        };
        let (out, losses) = full_forward(&model, &p, &single, &objective).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert!((losses.l_rec.unwrap() - nll_pooled).abs() < 1e-12);
    }
}

#[test]
fn reconstruction_gradient_reaches_features() {
    let data = small_task(4, 3, "train").manifest;
    let model = small_model(&data, false, 4);
    let items: Vec<BatchItem> = data
        .samples
        .iter()
        .flat_map(|s| s.phrases.iter().map(move |p| BatchItem { phrase: p, proposals: &s.proposals }))
        .collect();
    let objective = Objective {
        mode: Mode::Unsupervised,
        lambda: 0.0,
        att_norm: Default::default(),
    };
    let mut grads = model.zeros_like();
    let r = model.run_batch(&items, &objective, BnMode::Train, Some(&mut grads), true).unwrap();
    let fg = r.feature_grads.unwrap();
    assert_eq!(fg.len(), items.len());
    for g in &fg {
        assert!(g.norm_sq() > 0.0);
    }
    assert!(grads.attention.w_v.norm_sq() > 0.0, "L_rec must train the attention");
}

#[test]
fn manifest_round_trip_is_byte_identical() {
    let out = small_task(20, 5, "train");
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (da.path().join("m.jsonl"), db.path().join("m.jsonl"));
    out.vocab.save(&da.path().join("vocab.txt")).unwrap();
    out.vocab.save(&db.path().join("vocab.txt")).unwrap();
    save_manifest(&out.manifest, &a).unwrap();
    let loaded = load_manifest(&a).unwrap();
    assert_eq!(loaded, out.manifest);
    save_manifest(&loaded, &b).unwrap();
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
    assert!(
        std::fs::read(da.path().join("m.features.f64")).unwrap()
            == std::fs::read(db.path().join("m.features.f64")).unwrap()
    );
}

#[test]
fn manifest_errors_name_the_line_and_unknown_tokens_become_unk() {
    let out = small_task(3, 6, "train");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    out.vocab.save(&dir.path().join("vocab.txt")).unwrap();
    save_manifest(&out.manifest, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();

    lines[2] = lines[2].replacen("\"tokens\":[", "\"tokens\":[9999,", 1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.samples[1].phrases[0].tokens[0], UNK_ID);

    lines[3] = "{\"image_id\": 5".into();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_manifest(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn planted_fraction_sets_the_upper_bound() {
    for rate in [0.0, 0.25, 0.8, 1.0] {
        let out = generate_synthetic(&SynthConfig {
            samples: 100,
            plant_rate: rate,
            ..SynthConfig::default()
        })
        .unwrap();
        let total = out.manifest.phrase_count();
        let expected = (rate * total as f64).round() / total as f64;
        assert_eq!(proposal_upperbound(&out.manifest), expected);
        assert_eq!(out.manifest.annotated_count(), (rate * total as f64).round() as usize);
    }
}

#[test]
fn report_partitions_and_matches_plain_argmax() {
    let val = small_task(60, 7, "val").manifest;
    let train_set = small_task(60, 8, "train").manifest;
    let model = small_model(&val, true, 9);
    let seen: HashSet<Vec<usize>> = grounder::eval::phrase_set(&train_set);
    let r = report(
        &val,
        &model,
        &ReportOptions {
            sentence_constraint: false,
            training_phrases: Some(&seen),
        },
    )
    .unwrap();
    assert_eq!(r.per_type.values().map(|g| g.count).sum::<usize>(), r.evaluated);
    assert_eq!(r.evaluated, val.phrase_count());

    let mut hits = 0;
    for s in &val.samples {
        for p in &s.phrases {
            let (out, _) = full_forward(&model, p, &s.proposals, &Objective::eval()).unwrap();
            hits += is_hit(&s.proposals.boxes[out.selected], p.gt_box.as_ref().unwrap()) as usize;
        }
    }
    assert_eq!(r.overall_accuracy, hits as f64 / r.evaluated as f64);
    let novel = r.novel.unwrap();
    let expected_novel = val
        .samples
        .iter()
        .flat_map(|s| &s.phrases)
        .filter(|p| !seen.contains(&p.tokens))
        .count();
    assert_eq!(novel.count, expected_novel);
}

#[test]
fn constraint_leaves_single_phrase_sentences_alone() {
    let mut val = small_task(80, 10, "val").manifest;
    for s in &mut val.samples {
        for (k, p) in s.phrases.iter_mut().enumerate() {
            p.sentence_id = p.sentence_id * 10 + k as u64;
        }
    }
    let model = small_model(&val, false, 11);
    let off = report(&val, &model, &ReportOptions::default()).unwrap();
    let on = report(
        &val,
        &model,
        &ReportOptions {
            sentence_constraint: true,
            training_phrases: None,
        },
    )
    .unwrap();
    assert_eq!(off.overall_accuracy, on.overall_accuracy);
}

#[test]
fn single_proposal_images_are_always_grounded() {
    let mut val = small_task(30, 12, "val").manifest;
    for s in &mut val.samples {
        let gt = s.phrases[0].gt_box.unwrap();
        let row = s.proposals.features.row(0).to_vec();
        s.proposals = ProposalSet::new(vec![gt], Tensor::from_rows(&[row]).unwrap()).unwrap();
        s.phrases.truncate(1);
        s.phrases[0].gt_attention = Some(0);
    }
    let model = small_model(&val, false, 13);
    assert_eq!(report(&val, &model, &ReportOptions::default()).unwrap().overall_accuracy, 1.0);
}

fn quick_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 2,
        batch_size: 16,
        seed: 21,
        adam: AdamConfig {
            lr: 0.003,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_trainable_parameters() {
    let data = small_task(30, 14, "train").manifest;
    let model = small_model(&data, false, 15);
    let mut cfg = quick_config(Mode::SemiSupervised);
    cfg.epochs = 1;
    cfg.adam.lr = 0.0;
    let out = train(&data, Some(&data), &cfg, model.clone()).unwrap();
    assert_eq!(out.last, model);
    assert_eq!(out.metrics.len(), 1);
    assert!(out.metrics[0].val_accuracy.is_some());
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let data = small_task(60, 16, "train").manifest;
    let val = small_task(30, 17, "val").manifest;
    let cfg = TrainConfig {
        epochs: 4,
        ..quick_config(Mode::SemiSupervised)
    };
    let masked = training_set(&data, &cfg).unwrap();
    let a = train(&masked, Some(&val), &cfg, small_model(&data, true, 18)).unwrap();
    let b = train(&masked, Some(&val), &cfg, small_model(&data, true, 18)).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model, b.model);
    let best = a.metrics.iter().map(|m| m.val_accuracy.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.metrics[a.best_epoch - 1].val_accuracy.unwrap(), best);
    let rerun = report(&val, &a.model, &ReportOptions::default()).unwrap().overall_accuracy;
    assert_eq!(rerun, best);
}

#[test]
fn thread_count_does_not_change_results() {
    let data = small_task(40, 19, "train").manifest;
    let cfg = quick_config(Mode::SemiSupervised);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&data, None, &cfg, small_model(&data, true, 20)).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.metrics, four.metrics);
    assert_eq!(one.model, four.model);
}

#[test]
fn logged_batches_combine_losses_exactly() {
    let data = small_task(40, 22, "train").manifest;
    let cfg = TrainConfig {
        supervision_fraction: 0.25,
        ..quick_config(Mode::SemiSupervised)
    };
    let masked = training_set(&data, &cfg).unwrap();
    let mut logs = Vec::new();
    train_observed(&masked, None, &cfg, small_model(&data, true, 23), |b| logs.push(*b)).unwrap();
    assert!(!logs.is_empty());
    for b in &logs {
        let Losses { total, l_att, l_rec } = b.losses;
        assert_eq!(total.unwrap(), b.lambda * l_att.unwrap() + l_rec.unwrap());
    }
}

#[test]
fn fully_supervised_training_skips_unlabeled_phrases() {
    let data = generate_synthetic(&SynthConfig {
        samples: 40,
        plant_rate: 0.5,
        ..SynthConfig::default()
    })
    .unwrap()
    .manifest;
    let cfg = quick_config(Mode::FullySupervised);
    let mut sizes = 0;
    train_observed(&data, None, &cfg, small_model(&data, true, 24), |b| {
        sizes += b.size;
        assert!(b.losses.l_rec.is_none());
    })
    .unwrap();
    assert_eq!(sizes, cfg.epochs * data.annotated_count());
}

#[test]
fn non_finite_features_fail_as_numeric_errors() {
    let mut data = small_task(8, 25, "train").manifest;
    data.samples[3].proposals.features.data_mut()[5] = f64::NAN;
    let err = train(&data, None, &quick_config(Mode::Unsupervised), small_model(&data, false, 26))
        .map(|_| ())
        .unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}
