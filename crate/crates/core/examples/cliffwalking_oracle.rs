//! Solves the cliff gridworld exactly, draws the optimal route and checks it
//! against simulated episodes.
//!
//! Usage: `cargo run --release --example cliffwalking_oracle`

use anyhow::Result;
use rpo_lab::env::{cliffwalking_as_mdp, CliffWalking, GridSpec, Move};
use rpo_lab::mdp::policy_iteration;
use rpo_lab::trainer::evaluate;

fn main() -> Result<()> {
    let spec = GridSpec::default();
    let mdp = cliffwalking_as_mdp(&spec, 0.99)?;
    let (policy, values) = policy_iteration(&mdp)?;

    let mut route = vec![spec.start];
    let mut cell = spec.start;
    while !spec.is_terminal(cell) && route.len() <= spec.n_cells() {
        cell = spec.neighbour(cell, Move::ALL[policy.argmax(cell)]);
        route.push(cell);
    }
    for row in 0..spec.height {
        let line: String = (0..spec.width)
            .map(|col| {
                let c = row * spec.width + col;
                match c {
                    _ if c == spec.start => 'S',
                    _ if c == spec.goal => 'G',
                    _ if spec.cliff_cells.contains(&c) => 'C',
                    _ if route.contains(&c) => '*',
                    _ => '.',
                }
            })
            .collect();
        println!("{line}");
    }
    println!(
        "\nroute length {} moves, start value {:.4}",
        route.len() - 1,
        values.v[spec.start]
    );

    let mut env = CliffWalking::new(spec)?;
    let eval = evaluate(&policy, &mut env, 100, 0)?;
    println!(
        "simulated: mean return {:.2}, mean length {:.2}, cliff falls {}",
        eval.mean_return, eval.mean_length, eval.cliff_falls
    );
    Ok(())
}
