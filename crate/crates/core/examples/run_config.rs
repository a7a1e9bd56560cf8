//! Layered run configuration: defaults, then a TOML file, then
//! `key=value` overrides. Unknown keys are rejected.
//!
//! cargo run --example run_config

use grounder::cli::RunConfig;

fn main() -> grounder::Result<()> {
    let file = "[train]\nmode = \"full\"\nepochs = 12\n";
    let config = RunConfig::from_parts(Some(file), &["--train.epochs=4".into(), "train.adam.lr=0.003".into()])?;
    println!(
        "mode {} epochs {} lr {} batch {}",
        config.train.mode.name(),
        config.train.epochs,
        config.train.adam.lr,
        config.train.batch_size
    );

    match RunConfig::from_parts(None, &["train.epoch=3".into()]) {
        Err(e) => println!("rejected (exit {}): {e}", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    print!("{}", config.to_toml());
    Ok(())
}
