//! Compares analytic gradients against central differences for every
//! parameter group of each training graph.
//!
//! cargo run --release --example gradcheck

use grounder::gradcheck::{self, GradcheckConfig};

fn main() -> grounder::Result<()> {
    let checks = gradcheck::run(&GradcheckConfig::default())?;
    for g in &checks {
        println!(
            "{:5} bn={:5} {:14} {:5} params  max rel {:.2e}  {}",
            g.mode,
            g.batchnorm,
            g.group,
            g.parameters,
            g.max_rel_error,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|g| !g.passed).count();
    println!("{} groups, {failed} failed", checks.len());
    Ok(())
}
