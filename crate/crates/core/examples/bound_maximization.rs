//! Improves a policy on the two-state MDP by repeatedly maximizing the
//! penalized lower bound and shows that the return never decreases.
//!
//! Usage: `cargo run --release --example bound_maximization -- [k] [gamma]`

use anyhow::Result;
use rpo_lab::mdp::{eta, policy_iteration, TabularMdp, TabularPolicy};
use rpo_lab::verify::monotone_improvement;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map_or(Ok(2), |s| s.parse())?;
    let gamma: f64 = args.get(2).map_or(Ok(0.5), |s| s.parse())?;
    let mdp = TabularMdp::from_toml_str(include_str!("../fixtures/m2.toml"))?.with_gamma(gamma)?;
    let start = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let weights = [1e-4, 1e-3, 1e-2, 0.1, 0.3, 1.0];
    let steps = monotone_improvement(&mdp, &start, k, &weights, 50)?;
    println!("{:>4} {:>12} {:>12} {:>12}", "step", "eta before", "eta after", "bound");
    for (i, s) in steps.iter().enumerate() {
        println!("{i:>4} {:>12.6} {:>12.6} {:>12.3e}", s.eta_before, s.eta_after, s.bound);
    }
    let (best, _) = policy_iteration(&mdp)?;
    println!(
        "\nstart {:.6}, reached {:.6}, optimum {:.6}",
        eta(&mdp, &start)?,
        steps.last().map_or(eta(&mdp, &start)?, |s| s.eta_after),
        eta(&mdp, &best)?
    );
    if steps.is_empty() {
        println!("no candidate has a positive bound at this discount and horizon");
    }
    Ok(())
}
