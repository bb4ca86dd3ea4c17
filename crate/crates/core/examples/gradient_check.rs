//! Compares the analytic gradient of each clipped objective with central
//! differences on a random off-policy batch.
//!
//! Usage: `cargo run --release --example gradient_check -- [seed]`

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpo_lab::advantage::{Step, Trajectory};
use rpo_lab::objective::{full_objective, Batch, ClipConfig, Variant};
use rpo_lab::policy::{Architecture, Mlp, PolicyNetwork};

fn network(seed: u64) -> PolicyNetwork {
    PolicyNetwork::from_mlp(Mlp::init(Architecture::new(5, vec![8], 3), seed, 1.0), seed)
}

fn main() -> Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let behavior = network(seed + 1000);
    let current = network(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 24;
    let steps: Vec<Step> = (0..len)
        .map(|t| {
            let (state, action) = (rng.random_range(0..5), rng.random_range(0..3));
            Ok(Step {
                state,
                action,
                reward: 0.0,
                behavior_logp: behavior.log_prob(state, action)?,
                done: t + 1 == len,
            })
        })
        .collect::<Result<_>>()?;
    let adv: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Batch::from_trajectories(&[Trajectory::new(steps, 0.0)], &[adv])?;

    let h = 1e-5;
    for variant in Variant::ALL {
        let config = ClipConfig {
            epsilon: 0.2,
            epsilon1: 0.15,
            beta: 1.5,
            variant,
        };
        let out = full_objective(&batch, &current, &config, None)?;
        let mut params = current.params().to_vec();
        let mut worst = 0.0f64;
        for j in 0..params.len() {
            let orig = params[j];
            let mut at = |x: f64| -> Result<f64> {
                params[j] = x;
                let net = PolicyNetwork::from_mlp(Mlp::from_parts(current.architecture().clone(), params.clone())?, 0);
                Ok(full_objective(&batch, &net, &config, None)?.value)
            };
            let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            params[j] = orig;
            worst = worst.max((out.grad.grad[j] - numeric).abs() / numeric.abs().max(1e-6));
        }
        println!(
            "{:<14} objective {:>9.5}  clipped fractions {:.2}/{:.2}  max relative error {:.2e} over {} parameters",
            variant.as_str(),
            out.value,
            out.clipfrac0,
            out.clipfrac1,
            worst,
            params.len()
        );
    }
    println!("(points near a clip boundary can show a larger error)");
    Ok(())
}
