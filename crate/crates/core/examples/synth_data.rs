//! Generates a small synthetic grounding task and writes it to disk.
//!
//! cargo run --example synth_data -- [out_dir]

use grounder::data::{generate_synthetic, save_manifest, SynthConfig};
use grounder::eval::proposal_upperbound;

fn main() -> grounder::Result<()> {
    let out_dir = std::env::args().nth(1).unwrap_or_else(|| "synth-out".into());
    std::fs::create_dir_all(&out_dir).map_err(|e| grounder::Error::io(&out_dir, e))?;

    let cfg = SynthConfig {
        samples: 200,
        ..SynthConfig::default()
    };
    let out = generate_synthetic(&cfg)?;
    let m = &out.manifest;
    println!(
        "{} images, {} phrases, vocab {}, feature width {}",
        m.samples.len(),
        m.phrase_count(),
        m.vocab_size,
        m.feature_dim
    );
    println!("proposal upper bound {:.3}", proposal_upperbound(m));

    let first = &m.samples[0];
    for p in &first.phrases {
        println!("{}: \"{}\" -> {:?}", first.image_id, out.vocab.decode(&p.tokens), p.gt_box.unwrap());
    }
    let held: Vec<String> = out.world.held_out_phrases().iter().map(|p| out.vocab.decode(p)).collect();
    println!("names kept out of training: {held:?}");

    let dir = std::path::Path::new(&out_dir);
    out.vocab.save(&dir.join(&cfg.vocab_file))?;
    save_manifest(m, &dir.join("train.jsonl"))?;
    println!("wrote {}", dir.join("train.jsonl").display());
    Ok(())
}
