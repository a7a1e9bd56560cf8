//! Greedy one-box-per-phrase assignment within a sentence, on a hand-made
//! score matrix and on a full evaluation with and without the constraint.
//!
//! cargo run --release --example sentence_constraint

use grounder::data::{generate_synthetic, SynthConfig};
use grounder::eval::{report, sentence_constraint_assign, ReportOptions};
use grounder::{ModelConfig, ModelParams};

fn main() -> grounder::Result<()> {
    // both phrases prefer box 0; the stronger claim wins it
    let scores = vec![vec![0.9, 0.8, 0.1], vec![0.95, 0.2, 0.3]];
    let picked = sentence_constraint_assign(&scores)?;
    println!("scores {scores:?}");
    println!("assignment {picked:?}");

    let data = generate_synthetic(&SynthConfig {
        samples: 300,
        max_phrases: 3,
        ..SynthConfig::default()
    })?;
    let model = ModelParams::new(
        ModelConfig {
            vocab_size: data.manifest.vocab_size,
            feature_dim: data.manifest.feature_dim,
            ..ModelConfig::default()
        },
        5,
    )?;
    for on in [false, true] {
        let rep = report(
            &data.manifest,
            &model,
            &ReportOptions {
                sentence_constraint: on,
                training_phrases: None,
            },
        )?;
        println!("constraint {on:5}: accuracy {:.3} over {}", rep.overall_accuracy, rep.evaluated);
    }
    Ok(())
}
