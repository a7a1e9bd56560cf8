use grounder::attention::score_attention;
use grounder::data::{build_vocab, mask_supervision, union_box, DatasetManifest, Vocabulary};
use grounder::eval::{iou, sentence_constraint_assign};
use grounder::numerics::{argmax, softmax_stable};
use grounder::{BBox, ModelConfig, ModelParams, ProposalSet, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(x in prop::collection::vec(-30.0..30.0f64, 1..10), c in -500.0..500.0f64) {
        let a = softmax_stable(&x).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let b = softmax_stable(&shifted).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(argmax(&x), argmax(&a));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert!((ab - ba).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn union_ignores_order(boxes in prop::collection::vec(bbox(), 1..8), seed in any::<u64>()) {
        let u = union_box(&boxes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = boxes.clone();
        for _ in 0..100 {
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(union_box(&shuffled).unwrap(), u);
        }
        for b in &boxes {
            prop_assert!(u.x_min <= b.x_min && u.y_min <= b.y_min && u.x_max >= b.x_max && u.y_max >= b.y_max);
        }
    }

    #[test]
    fn constraint_is_injective_and_total(
        (scores, n) in (1usize..8).prop_flat_map(|n| (prop::collection::vec(prop::collection::vec(-5.0..5.0f64, n), 1..=n), Just(n)))
    ) {
        let got = sentence_constraint_assign(&scores).unwrap();
        prop_assert_eq!(got.len(), scores.len());
        let mut seen = vec![false; n];
        for &b in &got {
            prop_assert!(b < n && !seen[b]);
            seen[b] = true;
        }
    }

    #[test]
    fn vocabulary_text_round_trip(words in prop::collection::vec("[a-z]{1,6}", 0..30), min_freq in 1usize..3) {
        let corpus: Vec<Vec<&str>> = words.chunks(3).map(|c| c.iter().map(String::as_str).collect()).collect();
        let v = build_vocab(&corpus, min_freq);
        let back = Vocabulary::parse(&v.to_text(), std::path::Path::new("v")).unwrap();
        prop_assert_eq!(back.tokens(), v.tokens());
    }
}

fn dataset(n: usize) -> DatasetManifest {
    use grounder::data::{assign_all, GroundingSample};
    use grounder::Phrase;
    let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut d = DatasetManifest {
        split: "train".into(),
        vocab_file: "vocab.txt".into(),
        vocab_size: 5,
        feature_dim: 1,
        samples: (0..n)
            .map(|i| GroundingSample {
                image_id: format!("{i}"),
                proposals: ProposalSet::new(vec![b], Tensor::zeros(&[1, 1])).unwrap(),
                phrases: vec![Phrase {
                    tokens: vec![3],
                    sentence_id: i as u64,
                    phrase_type: None,
                    gt_box: Some(b),
                    gt_attention: None,
                }],
            })
            .collect(),
    };
    assign_all(&mut d);
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn supervision_masks_are_nested(seed in any::<u64>(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let d = dataset(64);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = mask_supervision(&d, lo, seed).unwrap();
        let large = mask_supervision(&d, hi, seed).unwrap();
        prop_assert_eq!(small.annotated_count(), (lo * 64.0).round() as usize);
        for (s, l) in small.samples.iter().zip(&large.samples) {
            if s.phrases[0].gt_attention.is_some() {
                prop_assert!(l.phrases[0].gt_attention.is_some());
            }
        }
    }

    #[test]
    fn scores_follow_proposal_permutations(seed in any::<u64>(), n in 1usize..8) {
        let config = ModelConfig {
            vocab_size: 6,
            feature_dim: 3,
            embed_dim: 4,
            hidden_dim: 5,
            attention_dim: 4,
            ..ModelConfig::default()
        };
        let model = ModelParams::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.3 - 1.0, (seed % 7) as f64 * 0.1, 0.5]).collect();
        let boxes: Vec<BBox> = (0..n).map(|i| BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let h = vec![0.2, -0.4, 0.1, 0.9, -0.3];
        let base = ProposalSet::new(boxes.clone(), Tensor::from_rows(&rows).unwrap()).unwrap();
        let permuted = ProposalSet::new(
            perm.iter().map(|&i| boxes[i]).collect(),
            Tensor::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap(),
        )
        .unwrap();
        let s = score_attention(&model.attention, &h, &base).unwrap();
        let sp = score_attention(&model.attention, &h, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((sp[k] - s[i]).abs() < 1e-12);
        }
    }
}
