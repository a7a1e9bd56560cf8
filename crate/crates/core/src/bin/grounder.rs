use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grounder::cli::{self, RunConfig};
use grounder::Result;

/// Phrase grounding by attention and reconstruction.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `--train.epochs=5` or `paths.run_dir=runs/a`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val/test task.
    Synth(Common),
    /// Train a model and write a run directory.
    Train(Common),
    /// Evaluate a checkpoint and write report.json / report.csv.
    Eval(Common),
    /// Train over supervision fractions and write sweep.csv.
    Sweep(Common),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(Common),
}

fn run(cli: Cli) -> Result<bool> {
    cli::configure_threads()?;
    let (Command::Synth(c) | Command::Train(c) | Command::Eval(c) | Command::Sweep(c) | Command::Gradcheck(c)) =
        &cli.command;
    let config = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    match cli.command {
        Command::Synth(_) => {
            let files = cli::cmd_synth(&config)?;
            println!("wrote {} {} {}", files.train.display(), files.val.display(), files.test.display());
        }
        Command::Train(_) => {
            let s = cli::cmd_train(&config)?;
            for m in &s.metrics {
                println!("{}", serde_json::to_string(m).expect("metrics serialize"));
            }
            println!("best epoch {} -> {}", s.best_epoch, s.checkpoint.display());
        }
        Command::Eval(_) => print!("{}", cli::cmd_eval(&config)?.to_csv()),
        Command::Sweep(_) => print!("{}", cli::sweep_csv(&cli::cmd_sweep(&config)?)),
        Command::Gradcheck(_) => {
            let checks = cli::cmd_gradcheck(&config)?;
            for g in &checks {
                println!(
                    "{:5} bn={:5} {:13} n={:5} max_rel={:.2e} {}",
                    g.mode,
                    g.batchnorm,
                    g.group,
                    g.parameters,
                    g.max_rel_error,
                    if g.passed { "pass" } else { "FAIL" }
                );
            }
            return Ok(checks.iter().all(|g| g.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
