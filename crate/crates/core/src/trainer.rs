//! The collect / estimate / update loop, evaluation, and per-update metrics.

use std::io::{Read, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::{compute_gae, normalize_advantages, split_even, Step, Trajectory, ValueNetworkFit};
use crate::env::{derive_seed, sample_index, CliffWalking, Environment, GridSpec, MdpEnv};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::objective::{full_objective, Batch, ClipConfig, Variant};
use crate::policy::{adam_step, AdamState, PolicyNetwork, StochasticPolicy, ValueNetwork};

/// Tolerance for the first-step ratio check of every update.
pub const ON_POLICY_TOL: f64 = 1e-9;

const STREAM_POLICY_INIT: u64 = 1;
const STREAM_VALUE_INIT: u64 = 2;
const STREAM_ACTIONS: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_VALUE_SHUFFLE: u64 = 5;
const STREAM_ENV: u64 = 6;
const STREAM_EVAL: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    CliffWalking {
        grid: GridSpec,
    },
    /// Tabular MDP loaded from a TOML document.
    Mdp {
        path: PathBuf,
        max_episode_steps: usize,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::CliffWalking {
            grid: GridSpec::default(),
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment + Send>> {
        match self {
            EnvSpec::CliffWalking { grid } => Ok(Box::new(CliffWalking::new(grid.clone())?)),
            EnvSpec::Mdp {
                path,
                max_episode_steps,
            } => Ok(Box::new(MdpEnv::new(TabularMdp::load(path)?, *max_episode_steps)?)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EnvSpec::CliffWalking { .. } => "cliffwalking".into(),
            EnvSpec::Mdp { path, .. } => path.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub clip: ClipConfig,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Environment steps collected per update.
    pub batch_size: usize,
    pub epochs_per_update: usize,
    pub minibatches_per_epoch: usize,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub value_epochs: usize,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub total_timesteps: usize,
    pub seed: u64,
    /// Episodes run with the final policy after training; zero skips evaluation.
    pub eval_episodes: usize,
    pub normalize_advantages: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::default(),
            clip: ClipConfig::default(),
            gamma: 0.99,
            gae_lambda: 0.95,
            batch_size: 256,
            epochs_per_update: 4,
            minibatches_per_epoch: 4,
            learning_rate: 2.5e-4,
            value_learning_rate: 1e-2,
            value_epochs: 4,
            policy_hidden: vec![64],
            value_hidden: vec![64],
            total_timesteps: 100_000,
            seed: 0,
            eval_episodes: 0,
            normalize_advantages: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if self.batch_size == 0 || self.minibatches_per_epoch == 0 {
            return Err(Error::Config("batch size and minibatch count must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(self.minibatches_per_epoch) {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by {} minibatches",
                self.batch_size, self.minibatches_per_epoch
            )));
        }
        if self.total_timesteps < self.batch_size {
            return Err(Error::Config(format!(
                "total timesteps {} smaller than one batch of {}",
                self.total_timesteps, self.batch_size
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config(format!("lambda {} not in [0, 1]", self.gae_lambda)));
        }
        if !(self.learning_rate > 0.0 && self.value_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn n_updates(&self) -> usize {
        self.total_timesteps / self.batch_size
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Metrics of one update, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub timesteps: usize,
    /// Mean undiscounted return of episodes finished during collection (NaN if none).
    pub mean_return: f64,
    pub mean_ep_len: f64,
    pub cliff_falls_cum: u64,
    pub loss_clip0: f64,
    pub loss_clip1: f64,
    pub clipfrac0: f64,
    pub clipfrac1: f64,
    pub value_loss: f64,
}

pub const METRIC_COLUMNS: [&str; 10] = [
    "update",
    "timesteps",
    "mean_return",
    "mean_ep_len",
    "cliff_falls_cum",
    "loss_clip0",
    "loss_clip1",
    "clipfrac0",
    "clipfrac1",
    "value_loss",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_digest: String,
    pub variant: Variant,
    pub code_version: String,
    pub config: TrainConfig,
    /// Minibatches whose auxiliary term was dropped for lack of consecutive steps.
    pub degraded_minibatches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<UpdateRecord>,
    pub manifest: RunManifest,
}

impl RunMetrics {
    /// Mean of a column over the trailing `fraction` of updates, skipping NaNs.
    pub fn final_window_mean(&self, fraction: f64, column: impl Fn(&UpdateRecord) -> f64) -> f64 {
        let n = self.records.len();
        let window = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let vals: Vec<f64> = self.records[n.saturating_sub(window)..]
            .iter()
            .map(column)
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn final_cliff_falls(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cliff_falls_cum)
    }
}

pub fn write_metrics_csv<W: Write>(records: &[UpdateRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<UpdateRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRIC_COLUMNS {
        return Err(Error::Config(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Trained networks together with their metrics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub policy: PolicyNetwork,
    pub value: ValueNetwork,
    /// Final-policy evaluation when `eval_episodes > 0`.
    pub evaluation: Option<EvalResult>,
}

struct Collector {
    env: Box<dyn Environment + Send>,
    state: usize,
    episode: u64,
    env_seed: u64,
    ep_return: f64,
    rng: ChaCha8Rng,
    cliff_falls: u64,
}

struct Collected {
    trajs: Vec<Trajectory>,
    /// State following the last step of each trajectory that did not terminate.
    tail_states: Vec<Option<usize>>,
    returns: Vec<f64>,
    lengths: Vec<usize>,
}

impl Collector {
    fn new(mut env: Box<dyn Environment + Send>, seed: u64) -> Self {
        let env_seed = derive_seed(seed, STREAM_ENV);
        let state = env.reset(derive_seed(env_seed, 0));
        Self {
            env,
            state,
            episode: 0,
            env_seed,
            ep_return: 0.0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ACTIONS)),
            cliff_falls: 0,
        }
    }

    fn collect(&mut self, policy: &PolicyNetwork, n: usize) -> Result<Collected> {
        let mut out = Collected {
            trajs: Vec::new(),
            tail_states: Vec::new(),
            returns: Vec::new(),
            lengths: Vec::new(),
        };
        let mut current = Vec::new();
        for t in 0..n {
            let probs = policy.forward(self.state)?;
            let action = sample_index(&probs, &mut self.rng);
            let res = self.env.step(action)?;
            self.ep_return += res.reward;
            self.cliff_falls += u64::from(res.cliff_fall);
            current.push(Step {
                state: self.state,
                action,
                reward: res.reward,
                behavior_logp: probs[action].ln(),
                done: res.terminated,
            });
            let episode_over = res.terminated || res.truncated;
            if episode_over || t + 1 == n {
                out.trajs.push(Trajectory::new(std::mem::take(&mut current), 0.0));
                out.tail_states.push((!res.terminated).then_some(res.next_state));
            }
            if episode_over {
                out.returns.push(self.ep_return);
                out.lengths.push(self.env.elapsed());
                self.ep_return = 0.0;
                self.episode += 1;
                self.state = self.env.reset(derive_seed(self.env_seed, self.episode));
            } else {
                self.state = res.next_state;
            }
        }
        Ok(out)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn diverged(update: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { what } => Error::Diverged { update, detail: what },
        other => other,
    }
}

/// Runs the full training loop; deterministic given the config.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let env = config.env.build()?;
    let (n_states, n_actions) = (env.n_states(), env.n_actions());
    let seed = config.seed;
    let mut policy = PolicyNetwork::new(
        n_states,
        config.policy_hidden.clone(),
        n_actions,
        derive_seed(seed, STREAM_POLICY_INIT),
    );
    let mut policy_adam = AdamState::new(policy.params().len());
    let mut value_fit = ValueNetworkFit::new(
        ValueNetwork::new(
            n_states,
            config.value_hidden.clone(),
            derive_seed(seed, STREAM_VALUE_INIT),
        ),
        config.value_learning_rate,
        config.value_epochs,
        config.minibatches_per_epoch,
        derive_seed(seed, STREAM_VALUE_SHUFFLE),
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));
    let mut collector = Collector::new(env, seed);
    let mut records = Vec::with_capacity(config.n_updates());
    let mut degraded_minibatches = 0;

    for update in 0..config.n_updates() {
        let wrap = diverged(update);
        let mut data = collector.collect(&policy, config.batch_size).map_err(&wrap)?;

        // advantages from the pre-update value function
        let mut advantages = Vec::with_capacity(data.trajs.len());
        let mut targets = Vec::with_capacity(config.batch_size);
        let mut states = Vec::with_capacity(config.batch_size);
        for (traj, tail) in data.trajs.iter_mut().zip(&data.tail_states) {
            traj.bootstrap_value = match tail {
                Some(s) => value_fit.net.value(*s).map_err(&wrap)?,
                None => 0.0,
            };
            let s = traj.states();
            let v = value_fit.values(&s).map_err(&wrap)?;
            let adv = compute_gae(traj, &v, config.gamma, config.gae_lambda)?;
            targets.extend(adv.iter().zip(&v).map(|(a, v)| a + v));
            states.extend(s);
            advantages.push(adv);
        }
        let mut batch = Batch::from_trajectories(&data.trajs, &advantages)?;
        if config.normalize_advantages {
            let mut flat: Vec<f64> = batch.samples.iter().map(|s| s.adv).collect();
            normalize_advantages(&mut flat);
            for (s, a) in batch.samples.iter_mut().zip(flat) {
                s.adv = a;
            }
        }

        let mut order: Vec<usize> = (0..batch.len()).collect();
        let (mut c0, mut c1, mut f0, mut f1, mut n_evals) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for epoch in 0..config.epochs_per_update {
            order.shuffle(&mut shuffle_rng);
            for (m, mb) in split_even(&order, config.minibatches_per_epoch).into_iter().enumerate() {
                let out = full_objective(&batch, &policy, &config.clip, Some(mb)).map_err(&wrap)?;
                if epoch == 0 && m == 0 && out.max_ratio_dev > ON_POLICY_TOL {
                    return Err(Error::OffPolicy {
                        update,
                        deviation: out.max_ratio_dev,
                    });
                }
                degraded_minibatches += usize::from(out.degraded);
                c0 += out.clip0;
                c1 += out.clip1;
                f0 += out.clipfrac0;
                f1 += out.clipfrac1;
                n_evals += 1;
                adam_step(policy.params_mut(), &out.grad, config.learning_rate, &mut policy_adam).map_err(&wrap)?;
            }
        }

        let history = value_fit.fit_targets(&states, &targets).map_err(&wrap)?;
        let denom = n_evals.max(1) as f64;
        let lengths: Vec<f64> = data.lengths.iter().map(|&l| l as f64).collect();
        records.push(UpdateRecord {
            update,
            timesteps: (update + 1) * config.batch_size,
            mean_return: mean(&data.returns),
            mean_ep_len: mean(&lengths),
            cliff_falls_cum: collector.cliff_falls,
            loss_clip0: c0 / denom,
            loss_clip1: c1 / denom,
            clipfrac0: f0 / denom,
            clipfrac1: f1 / denom,
            value_loss: history.last().copied().unwrap_or(f64::NAN),
        });
        log::debug!("update {update}: {:?}", records.last());
    }

    let manifest = RunManifest {
        seed,
        config_digest: config.digest(),
        variant: config.clip.variant,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        degraded_minibatches,
    };
    let evaluation = if config.eval_episodes > 0 {
        let mut env = config.env.build()?;
        Some(evaluate(
            &policy,
            env.as_mut(),
            config.eval_episodes,
            derive_seed(seed, STREAM_EVAL),
        )?)
    } else {
        None
    };
    Ok(TrainOutcome {
        metrics: RunMetrics { records, manifest },
        policy,
        value: value_fit.net,
        evaluation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub mean_length: f64,
    pub cliff_falls: u64,
}

/// Runs `episodes` episodes sampling actions from `policy`; each episode ends
/// on termination or truncation.
pub fn evaluate(
    policy: &dyn StochasticPolicy,
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidParameter {
            name: "episodes",
            detail: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ACTIONS));
    let env_seed = derive_seed(seed, STREAM_ENV);
    let (mut total_return, mut total_len, mut falls) = (0.0, 0usize, 0u64);
    for ep in 0..episodes {
        let mut state = env.reset(derive_seed(env_seed, ep as u64));
        loop {
            let probs = policy.action_probs(state)?;
            let res = env.step(sample_index(&probs, &mut rng))?;
            total_return += res.reward;
            falls += u64::from(res.cliff_fall);
            state = res.next_state;
            if res.terminated || res.truncated {
                break;
            }
        }
        total_len += env.elapsed();
    }
    Ok(EvalResult {
        mean_return: total_return / episodes as f64,
        mean_length: total_len as f64 / episodes as f64,
        cliff_falls: falls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            clip: ClipConfig {
                variant,
                ..ClipConfig::default()
            },
            batch_size: 64,
            total_timesteps: 256,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.minibatches_per_epoch = 3;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.total_timesteps = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn series_length_and_timesteps() {
        let out = train(&small_config(Variant::Rpo)).unwrap();
        let recs = &out.metrics.records;
        assert_eq!(recs.len(), 4);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.update, i);
            assert_eq!(r.timesteps, 64 * (i + 1));
        }
    }

    #[test]
    fn digest_changes_with_config() {
        let a = small_config(Variant::Rpo);
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let out = train(&small_config(Variant::Ppo)).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&out.metrics.records, &mut buf).unwrap();
        let back = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), out.metrics.records.len());
        for (a, b) in back.iter().zip(&out.metrics.records) {
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }
}
