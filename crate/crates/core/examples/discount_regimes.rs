//! Runs the check battery over several discount ranges and reports which
//! check families fail outside the range where they are guaranteed.
//!
//! Usage: `cargo run --release --example discount_regimes -- [instances]`

use std::collections::BTreeMap;

use anyhow::Result;
use rpo_lab::verify::{run_sweep, SweepConfig};

fn main() -> Result<()> {
    let instances: usize = std::env::args().nth(1).map_or(Ok(100), |s| s.parse())?;
    for (lo, hi) in [(0.05, 0.2), (0.2, 0.4), (0.4, 0.5), (0.5, 0.95)] {
        let report = run_sweep(&SweepConfig {
            instances,
            seed: 1,
            gamma_min: lo,
            gamma_max: hi,
            psi_samples: 100,
            ..SweepConfig::default()
        })?;
        let mut failing: BTreeMap<String, usize> = BTreeMap::new();
        for row in report.failures() {
            let family = row.check_name.trim_end_matches(char::is_numeric).trim_end_matches("_k");
            *failing.entry(family.to_string()).or_default() += 1;
        }
        let psi = report.psi;
        println!(
            "gamma in [{lo}, {hi}]: two-term set {} of {} candidates, inclusion violations {}",
            psi.in_psi2, psi.samples, psi.violations
        );
        if failing.is_empty() {
            println!("  every check passes");
        }
        for (family, n) in failing {
            println!("  {family}: {n} failing rows");
        }
    }
    Ok(())
}
