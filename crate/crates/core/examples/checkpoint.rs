//! Saves a trained model with its optimizer state and reads it back.
//!
//! cargo run --release --example checkpoint -- [path]

use grounder::checkpoint::{config_hash, Checkpoint};
use grounder::data::{generate_synthetic, SynthConfig};
use grounder::optim::{train, training_set, TrainConfig};
use grounder::{ModelConfig, ModelParams};

fn main() -> grounder::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "example-checkpoint.bin".into());
    let data = generate_synthetic(&SynthConfig {
        samples: 200,
        ..SynthConfig::default()
    })?;
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let model = ModelParams::new(
        ModelConfig {
            vocab_size: data.manifest.vocab_size,
            feature_dim: data.manifest.feature_dim,
            batchnorm: tc.resolved_batchnorm(),
            ..ModelConfig::default()
        },
        0,
    )?;
    let out = train(&training_set(&data.manifest, &tc)?, None, &tc, model)?;

    let run_config = serde_json::to_value(&tc).expect("config serializes");
    println!("config hash {}", config_hash(&run_config));
    let ckpt = Checkpoint {
        model: out.model,
        adam: Some(out.adam),
        run_config,
        best_epoch: out.best_epoch,
        metrics: out.metrics,
    };
    ckpt.save(std::path::Path::new(&path))?;

    let back = Checkpoint::load(std::path::Path::new(&path))?;
    println!(
        "{path}: {} tensors, best epoch {}, adam step {}",
        back.model.tensors().len(),
        back.best_epoch,
        back.adam.as_ref().map_or(0, |a| a.t)
    );
    println!("bit-exact: {}", back.to_bytes() == ckpt.to_bytes());
    Ok(())
}
