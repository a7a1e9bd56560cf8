//! Runs the supervision-fraction sweep through the same entry points as the
//! command line: synthesize a task, train one model per fraction and print
//! `sweep.csv`.
//!
//! cargo run --release --example sweep -- [work_dir]

use grounder::cli::{self, RunConfig};

fn main() -> grounder::Result<()> {
    let work = std::env::args().nth(1).unwrap_or_else(|| "sweep-out".into());
    let config = RunConfig::from_parts(
        Some(
            r#"
[splits]
train = 400
val = 100
test = 100

[train]
epochs = 2

[sweep]
fractions = [0.0, 0.0312, 0.125, 1.0]
"#,
        ),
        &[
            format!("paths.data_dir={work}/data"),
            format!("paths.train={work}/data/train.jsonl"),
            format!("paths.val={work}/data/val.jsonl"),
            format!("paths.test={work}/data/test.jsonl"),
            format!("paths.run_dir={work}/runs"),
        ],
    )?;
    cli::cmd_synth(&config)?;
    let rows = cli::cmd_sweep(&config)?;
    print!("{}", cli::sweep_csv(&rows));
    Ok(())
}
