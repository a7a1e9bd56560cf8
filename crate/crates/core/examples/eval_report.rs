//! Trains briefly, then prints the evaluation report: overall accuracy,
//! per-type rows, the novel-phrase row and the proposal upper bound.
//!
//! cargo run --release --example eval_report

use grounder::data::{generate_synthetic, SynthConfig};
use grounder::eval::{phrase_set, report, ReportOptions};
use grounder::optim::{train, training_set, TrainConfig};
use grounder::{Mode, ModelConfig, ModelParams};

fn main() -> grounder::Result<()> {
    let train_data = generate_synthetic(&SynthConfig {
        samples: 600,
        ..SynthConfig::default()
    })?;
    let test_data = generate_synthetic(&SynthConfig {
        samples: 200,
        seed: 3,
        split: "test".into(),
        ..SynthConfig::default()
    })?;

    let tc = TrainConfig {
        mode: Mode::FullySupervised,
        epochs: 3,
        ..TrainConfig::default()
    };
    let model = ModelParams::new(
        ModelConfig {
            vocab_size: train_data.manifest.vocab_size,
            feature_dim: train_data.manifest.feature_dim,
            batchnorm: tc.resolved_batchnorm(),
            ..ModelConfig::default()
        },
        0,
    )?;
    let model = train(&training_set(&train_data.manifest, &tc)?, None, &tc, model)?.model;

    let seen = phrase_set(&train_data.manifest);
    let rep = report(
        &test_data.manifest,
        &model,
        &ReportOptions {
            sentence_constraint: false,
            training_phrases: Some(&seen),
        },
    )?;
    print!("{}", rep.to_csv());
    if let Some(novel) = &rep.novel {
        println!("novel phrases: {} at {:.3}", novel.count, novel.accuracy);
    }
    Ok(())
}
