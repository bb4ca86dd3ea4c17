//! Trains one policy on the cliff gridworld and prints a learning curve.
//!
//! Usage: `cargo run --release --example train_cliffwalking -- [ppo|rpo|rpo3|rpo-jointclip] [seed] [timesteps]`

use anyhow::{anyhow, Result};
use rpo_lab::objective::Variant;
use rpo_lab::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let tag = args.get(1).map_or("rpo", String::as_str);
    let variant = Variant::ALL
        .into_iter()
        .find(|v| v.as_str() == tag)
        .ok_or_else(|| anyhow!("unknown variant {tag}"))?;
    let mut config = TrainConfig {
        seed: args.get(2).map_or(Ok(0), |s| s.parse())?,
        total_timesteps: args.get(3).map_or(Ok(100_000), |s| s.parse())?,
        eval_episodes: 50,
        ..TrainConfig::default()
    };
    config.clip.variant = variant;

    let out = train(&config)?;
    let records = &out.metrics.records;
    let stride = (records.len() / 20).max(1);
    println!(
        "{:>7} {:>10} {:>9} {:>9} {:>8} {:>8}",
        "update", "timesteps", "return", "length", "falls", "clipfrac"
    );
    for r in records.iter().step_by(stride) {
        println!(
            "{:>7} {:>10} {:>9.2} {:>9.2} {:>8} {:>8.3}",
            r.update, r.timesteps, r.mean_return, r.mean_ep_len, r.cliff_falls_cum, r.clipfrac0
        );
    }
    if let Some(eval) = out.evaluation {
        println!(
            "\nfinal policy over 50 episodes: return {:.2}, length {:.2}, cliff falls {}",
            eval.mean_return, eval.mean_length, eval.cliff_falls
        );
    }
    Ok(())
}
