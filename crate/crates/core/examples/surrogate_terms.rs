//! Prints the chained surrogate terms, their weights and the resulting
//! identity and lower bound for one random MDP and policy pair.
//!
//! Usage: `cargo run --release --example surrogate_terms -- [seed] [gamma]`

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpo_lab::env::{random_mdp, random_policy};
use rpo_lab::theory::surrogate_report;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(Ok(1), |s| s.parse())?;
    let gamma: f64 = args.get(2).map_or(Ok(0.9), |s| s.parse())?;
    let mdp = random_mdp(seed, 4, 3, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi_hat = random_policy(4, 3, &mut rng);
    let pi = pi_hat.mix(&random_policy(4, 3, &mut rng), 0.2)?;

    for k in 1..=3 {
        let r = surrogate_report(&mdp, &pi, &pi_hat, k)?;
        println!(
            "k = {k}  (policy distance {:.4}, reward bound {:.4})",
            r.tv_eps, r.r_max
        );
        for i in 0..k {
            println!(
                "  i={i}  alpha {:>10.4}  L {:>11.4e}  L_hat {:>11.4e}",
                r.alpha[i], r.l[i], r.l_hat[i]
            );
        }
        println!("  beta_k {:.4}  G_k {:.4e}  G_hat {:.4e}", r.beta_k, r.g_k, r.g_hat);
        println!(
            "  eta gap {:.10e}  surrogate total {:.10e}  lower bound {:.6e} (penalty {:.4e})\n",
            r.eta_gap,
            r.generalized_surrogate_total(),
            r.lower_bound(),
            r.c_hat_k
        );
    }
    Ok(())
}
