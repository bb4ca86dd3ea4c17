//! Runs the randomized identity and bound battery and summarizes each check family.
//!
//! Usage: `cargo run --release --example verify_sweep -- [instances] [seed]`

use std::collections::BTreeMap;

use anyhow::Result;
use rpo_lab::verify::{run_sweep, SweepConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = SweepConfig {
        instances: args.get(1).map_or(Ok(200), |s| s.parse())?,
        seed: args.get(2).map_or(Ok(7), |s| s.parse())?,
        ..SweepConfig::default()
    };
    let report = run_sweep(&config)?;

    // family -> (rows, failures, worst gap)
    let mut families: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    for row in &report.rows {
        let family = row
            .check_name
            .split("_g0")
            .next()
            .unwrap_or(&row.check_name)
            .to_string();
        let entry = families.entry(family).or_insert((0, 0, f64::NEG_INFINITY));
        entry.0 += 1;
        entry.1 += usize::from(!row.pass);
        entry.2 = entry.2.max(row.gap.abs());
    }
    println!("{:<28} {:>6} {:>6} {:>12}", "check", "rows", "fail", "max |gap|");
    for (name, (rows, fails, gap)) in &families {
        println!("{name:<28} {rows:>6} {fails:>6} {gap:>12.3e}");
    }
    let psi = report.psi;
    println!(
        "\nsolution sets: {} candidates, {} in the one-term set, {} in the two-term set, {} violations, {} strict witnesses",
        psi.samples, psi.in_psi1, psi.in_psi2, psi.violations, psi.witnesses
    );
    println!("all checks pass: {}", report.all_pass());
    Ok(())
}
