//! Trains the grounding model on a synthetic task in one of the three
//! training modes and prints per-epoch metrics.
//!
//! cargo run --release --example train -- [unsup|semi|full] [fraction] [epochs]

use grounder::data::{generate_synthetic, SynthConfig};
use grounder::optim::{train, training_set, AdamConfig, TrainConfig};
use grounder::{Mode, ModelConfig, ModelParams};

fn main() -> grounder::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode: Mode = args.get(1).map_or(Ok(Mode::SemiSupervised), |s| s.parse())?;
    let fraction: f64 = args.get(2).map_or(0.25, |s| s.parse().expect("fraction"));
    let epochs: usize = args.get(3).map_or(5, |s| s.parse().expect("epochs"));

    let train_data = generate_synthetic(&SynthConfig {
        samples: 1000,
        ..SynthConfig::default()
    })?;
    let val_data = generate_synthetic(&SynthConfig {
        samples: 250,
        seed: 2,
        split: "val".into(),
        ..SynthConfig::default()
    })?;

    let tc = TrainConfig {
        mode,
        supervision_fraction: fraction,
        epochs,
        adam: AdamConfig {
            lr: 0.003,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    println!("mode {} fraction {fraction} lambda {}", mode.name(), tc.resolved_lambda());
    let model = ModelParams::new(
        ModelConfig {
            vocab_size: train_data.manifest.vocab_size,
            feature_dim: train_data.manifest.feature_dim,
            embed_dim: 32,
            hidden_dim: 64,
            attention_dim: 64,
            batchnorm: tc.resolved_batchnorm(),
            ..ModelConfig::default()
        },
        tc.seed,
    )?;

    let data = training_set(&train_data.manifest, &tc)?;
    let out = train(&data, Some(&val_data.manifest), &tc, model)?;
    for m in &out.metrics {
        println!(
            "epoch {:2}  loss {:.4}  val {:.3}",
            m.epoch,
            m.train_loss,
            m.val_accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("best epoch {}", out.best_epoch);
    Ok(())
}
