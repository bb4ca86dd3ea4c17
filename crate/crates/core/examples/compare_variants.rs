//! Paired-seed comparison of training variants on the default cliff gridworld.
//!
//! Usage: `cargo run --release --example compare_variants -- [seeds] [timesteps]`

use anyhow::Result;
use rayon::prelude::*;
use rpo_lab::objective::Variant;
use rpo_lab::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(Ok(10), |s| s.parse())?;
    let timesteps: usize = args.get(2).map_or(Ok(100_000), |s| s.parse())?;
    for variant in [Variant::Ppo, Variant::Rpo, Variant::Rpo3, Variant::RpoJointClip] {
        let runs = (0..seeds)
            .into_par_iter()
            .map(|seed| {
                let mut cfg = TrainConfig {
                    seed,
                    total_timesteps: timesteps,
                    ..TrainConfig::default()
                };
                cfg.clip.variant = variant;
                train(&cfg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = runs.len() as f64;
        let falls = runs.iter().map(|r| r.metrics.final_cliff_falls() as f64).sum::<f64>() / n;
        let len = runs
            .iter()
            .map(|r| r.metrics.final_window_mean(0.2, |u| u.mean_ep_len))
            .sum::<f64>()
            / n;
        let ret = runs
            .iter()
            .map(|r| r.metrics.final_window_mean(0.2, |u| u.mean_return))
            .sum::<f64>()
            / n;
        println!("{variant:>14}: cliff falls {falls:8.1}  final length {len:7.2}  final return {ret:9.2}");
    }
    Ok(())
}
