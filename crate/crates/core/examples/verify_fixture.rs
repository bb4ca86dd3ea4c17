//! Runs the full check battery on the bundled two-state MDP and prints every row.
//!
//! Usage: `cargo run --release --example verify_fixture -- [seed]`

use anyhow::Result;
use rpo_lab::mdp::TabularMdp;
use rpo_lab::verify::run_fixture;

fn main() -> Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let mdp = TabularMdp::from_toml_str(include_str!("../fixtures/m2.toml"))?;
    let report = run_fixture(&mdp, seed, &[1, 2, 3], 2000)?;
    println!("{:<32} {:>14} {:>14} {:>11}  pass", "check", "lhs", "rhs/bound", "gap");
    for row in &report.rows {
        println!(
            "{:<32} {:>14.6e} {:>14.6e} {:>11.2e}  {}",
            row.check_name, row.lhs, row.rhs_or_bound, row.gap, row.pass
        );
    }
    println!(
        "\n{} of {} checks pass",
        report.rows.iter().filter(|r| r.pass).count(),
        report.rows.len()
    );
    Ok(())
}
