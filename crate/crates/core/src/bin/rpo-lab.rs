//! Command-line front end: `verify`, `train` and `ablate`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rpo_lab::objective::{ClipConfig, Variant};
use rpo_lab::report::{
    parse_env, resolve_out_dir, run_ablation, run_train, run_verify, AblationRequest, VerifyRequest,
};
use rpo_lab::trainer::TrainConfig;
use rpo_lab::verify::SweepConfig;

#[derive(Parser)]
#[command(
    name = "rpo-lab",
    version,
    about = "Verify surrogate bounds and train clipped policy optimizers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every identity and bound on random tabular MDPs.
    Verify(VerifyArgs),
    /// Train one algorithm over one or more seeds.
    Train(TrainArgs),
    /// Sweep variants over a grid of second clip ranges and weights.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    max_states: usize,
    #[arg(long, default_value_t = 4)]
    max_actions: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    k_list: Vec<usize>,
    /// Candidate policies per instance for the solution-set inclusion check.
    #[arg(long, default_value_t = 500)]
    psi_samples: usize,
    /// Check a single MDP file instead of random instances.
    #[arg(long)]
    mdp: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainingFlags {
    /// `cliffwalking` or a path to an MDP TOML file.
    #[arg(long, default_value = "cliffwalking")]
    env: String,
    #[arg(long, default_value_t = 100_000)]
    timesteps: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Episode cap for MDP-file environments.
    #[arg(long, default_value_t = 200)]
    max_episode_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "rpo")]
    algo: Variant,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0.1)]
    epsilon1: f64,
    #[arg(long, default_value_t = 3.0)]
    beta: f64,
    #[command(flatten)]
    common: TrainingFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "rpo,rpo3,rpo-jointclip")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    epsilon1_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,1,3")]
    beta_grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    common: TrainingFlags,
}

fn base_config(flags: &TrainingFlags, clip: ClipConfig) -> TrainConfig {
    TrainConfig {
        env: parse_env(&flags.env, flags.max_episode_steps),
        clip,
        total_timesteps: flags.timesteps,
        ..TrainConfig::default()
    }
}

fn seed_list(first: u64, count: u64) -> Vec<u64> {
    (first..first + count).collect()
}

fn verify(args: VerifyArgs, argv: &[String]) -> Result<ExitCode> {
    let request = VerifyRequest {
        sweep: SweepConfig {
            instances: args.instances,
            seed: args.seed,
            max_states: args.max_states,
            max_actions: args.max_actions,
            k_list: args.k_list,
            psi_samples: args.psi_samples,
            ..SweepConfig::default()
        },
        mdp: args.mdp,
    };
    let out = resolve_out_dir(args.out);
    let outcome = run_verify(&request, &out, argv)?;
    let s = &outcome.summary;
    println!(
        "{} checks, {} failures; solution-set sweep: {} candidates, {} two-term members, {} violations, {} witnesses",
        s.checks, s.failures, s.psi_samples, s.psi_two_term_members, s.psi_violations, s.psi_witnesses
    );
    println!("wrote {}", outcome.csv_path.display());
    if s.failures > 0 {
        for row in outcome.report.failures() {
            eprintln!(
                "violation: instance seed {} check {} lhs {:e} rhs {:e}",
                row.instance_seed, row.check_name, row.lhs, row.rhs_or_bound
            );
        }
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn train(args: TrainArgs, argv: &[String]) -> Result<ExitCode> {
    let clip = ClipConfig {
        epsilon: args.common.epsilon,
        epsilon1: args.epsilon1,
        beta: args.beta,
        variant: args.algo,
    };
    let config = TrainConfig {
        seed: args.seed,
        ..base_config(&args.common, clip)
    };
    if args.common.dump_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(ExitCode::SUCCESS);
    }
    let out = resolve_out_dir(args.common.out);
    let files = run_train(&config, &seed_list(args.seed, args.seeds), &out, argv)?;
    for (path, s) in files.run_csvs.iter().zip(&files.summaries) {
        println!(
            "{}: final return {:.2}, final length {:.2}, cliff falls {}",
            path.display(),
            s.final_return,
            s.final_len,
            s.cliff_falls
        );
    }
    println!("wrote {}", files.aggregate_csv.display());
    Ok(ExitCode::SUCCESS)
}

fn ablate(args: AblateArgs, argv: &[String]) -> Result<ExitCode> {
    let base = base_config(&args.common, ClipConfig::default());
    let request = AblationRequest {
        base,
        variants: args.variants,
        epsilon1_grid: args.epsilon1_grid,
        beta_grid: args.beta_grid,
        seeds: seed_list(args.seed, args.seeds),
    };
    if args.common.dump_config {
        println!("{}", serde_json::to_string_pretty(&request)?);
        return Ok(ExitCode::SUCCESS);
    }
    let out = resolve_out_dir(args.common.out);
    let (rows, path) = run_ablation(&request, &out, argv)?;
    println!("{} runs written to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(args) => verify(args, &argv),
        Command::Train(args) => train(args, &argv),
        Command::Ablate(args) => ablate(args, &argv),
    }
    .context("rpo-lab failed");
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.chain().any(|e| {
                matches!(
                    e.downcast_ref::<rpo_lab::Error>(),
                    Some(
                        rpo_lab::Error::Config(_)
                            | rpo_lab::Error::InvalidParameter { .. }
                            | rpo_lab::Error::HorizonOutOfRange { .. }
                    )
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
