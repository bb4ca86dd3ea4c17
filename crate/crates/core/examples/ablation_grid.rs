//! Sweeps the second-ratio weight for the two-ratio variants and writes the
//! long-format ablation table.
//!
//! Usage: `cargo run --release --example ablation_grid -- [out_dir] [seeds] [timesteps]`

use std::path::PathBuf;

use anyhow::Result;
use rpo_lab::objective::Variant;
use rpo_lab::report::{run_ablation, AblationRequest};
use rpo_lab::trainer::TrainConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out_dir = PathBuf::from(args.get(1).map_or("ablation_out", String::as_str));
    let seeds: u64 = args.get(2).map_or(Ok(3), |s| s.parse())?;
    let timesteps: usize = args.get(3).map_or(Ok(20_000), |s| s.parse())?;
    std::fs::create_dir_all(&out_dir)?;
    let request = AblationRequest {
        base: TrainConfig {
            total_timesteps: timesteps,
            ..TrainConfig::default()
        },
        variants: vec![Variant::Rpo, Variant::Rpo3, Variant::RpoJointClip],
        epsilon1_grid: vec![0.1],
        beta_grid: vec![0.3, 1.0, 3.0],
        seeds: (0..seeds).collect(),
    };
    let (rows, path) = run_ablation(&request, &out_dir, &args)?;
    println!(
        "{:<14} {:>5} {:>5} {:>10} {:>8} {:>7}",
        "variant", "beta", "seed", "return", "length", "falls"
    );
    for r in &rows {
        println!(
            "{:<14} {:>5} {:>5} {:>10.2} {:>8.2} {:>7}",
            r.variant.as_str(),
            r.beta,
            r.seed,
            r.final_return,
            r.final_len,
            r.cliff_falls
        );
    }
    println!("\nwrote {}", path.display());
    Ok(())
}
