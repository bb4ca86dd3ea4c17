//! Trajectory bookkeeping, GAE(λ), consecutive-pair extraction and value fitting.
//!
//! A [`Trajectory`] is a run of steps in which episodes are separated only by
//! `done` flags. The trainer emits one trajectory per episode segment so that a
//! segment cut by the batch boundary or a time limit carries its own bootstrap.
//!
//! Columnar batch format (CSV, header row):
//! `traj_id, step, state, action, reward, behavior_logp, done, bootstrap_value`.
//! `bootstrap_value` repeats on every row of a trajectory.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::policy::{adam_step, AdamState, GradientBuffer, ValueNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub behavior_logp: f64,
    /// The episode terminated after this step (absorbing, no bootstrap).
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// `V(s_T)` for a final step that did not terminate; ignored otherwise.
    pub bootstrap_value: f64,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, bootstrap_value: f64) -> Self {
        Self { steps, bootstrap_value }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.state).collect()
    }

    /// Discounted return-to-go `G_t`, bootstrapping the final step when it did not terminate.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = self.tail_value();
        for (t, step) in self.steps.iter().enumerate().rev() {
            if step.done {
                acc = 0.0;
            }
            acc = step.reward + gamma * acc;
            out[t] = acc;
        }
        out
    }

    fn tail_value(&self) -> f64 {
        match self.steps.last() {
            Some(step) if !step.done => self.bootstrap_value,
            _ => 0.0,
        }
    }
}

/// GAE(λ) over TD residuals `δ_t = R_t + γ V(s_{t+1}) − V(s_t)`; the successor
/// value is zero after a `done` step and `bootstrap_value` after the final step.
pub fn compute_gae(traj: &Trajectory, values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != traj.steps.len() {
        return Err(Error::Dimension {
            axis: "values",
            expected: traj.steps.len(),
            got: values.len(),
        });
    }
    let n = traj.steps.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let step = &traj.steps[t];
        let (next_value, carry) = if step.done {
            (0.0, 0.0)
        } else if t + 1 == n {
            (traj.bootstrap_value, 0.0)
        } else {
            (values[t + 1], running)
        };
        let delta = step.reward + gamma * next_value - values[t];
        running = delta + gamma * lambda * carry;
        adv[t] = running;
    }
    Ok(adv)
}

/// Consecutive `(s, a, s′, a′)` within one episode, with both advantages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionPair {
    /// Position of `(s, a)` in the source trajectory; `(s′, a′)` sits at `index + 1`.
    pub index: usize,
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub a_next: usize,
    pub adv: f64,
    pub adv_next: f64,
    pub behavior_logp: f64,
    pub behavior_logp_next: f64,
}

/// One pair per consecutive step duo that does not cross a `done` flag.
pub fn extract_pairs(traj: &Trajectory, advantages: &[f64]) -> Vec<TransitionPair> {
    traj.steps
        .windows(2)
        .enumerate()
        .filter(|(_, w)| !w[0].done)
        .map(|(i, w)| TransitionPair {
            index: i,
            s: w[0].state,
            a: w[0].action,
            s_next: w[1].state,
            a_next: w[1].action,
            adv: advantages[i],
            adv_next: advantages[i + 1],
            behavior_logp: w[0].behavior_logp,
            behavior_logp_next: w[1].behavior_logp,
        })
        .collect()
}

/// In-place standardization; returns the `(mean, std)` used. Batches of size
/// one or with zero spread are only centred.
pub fn normalize_advantages(adv: &mut [f64]) -> (f64, f64) {
    if adv.is_empty() {
        return (0.0, 1.0);
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { std } else { 1.0 };
    adv.iter_mut().for_each(|a| *a = (*a - mean) / scale);
    (mean, scale)
}

/// Value network with its optimizer state and fitting schedule.
#[derive(Debug, Clone)]
pub struct ValueNetworkFit {
    pub net: ValueNetwork,
    pub adam: AdamState,
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    rng: ChaCha8Rng,
}

impl ValueNetworkFit {
    pub fn new(net: ValueNetwork, lr: f64, epochs: usize, minibatches: usize, seed: u64) -> Self {
        let adam = AdamState::new(net.params().len());
        Self {
            net,
            adam,
            lr,
            epochs,
            minibatches: minibatches.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn values(&self, states: &[usize]) -> Result<Vec<f64>> {
        states.iter().map(|&s| self.net.value(s)).collect()
    }

    /// Mean squared error of the current network against `targets`.
    pub fn loss(&self, states: &[usize], targets: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (&s, &y) in states.iter().zip(targets) {
            total += (self.net.value(s)? - y).powi(2);
        }
        let loss = total / states.len().max(1) as f64;
        ensure_finite(loss, || "value loss".into())?;
        Ok(loss)
    }

    /// Regresses onto fixed targets with shuffled minibatches; returns the
    /// full-batch loss after each epoch.
    pub fn fit_targets(&mut self, states: &[usize], targets: &[f64]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Err(Error::InvalidParameter {
                name: "batch",
                detail: "value fit needs at least one sample".into(),
            });
        }
        if states.len() != targets.len() {
            return Err(Error::Dimension {
                axis: "targets",
                expected: states.len(),
                got: targets.len(),
            });
        }
        let mut order: Vec<usize> = (0..states.len()).collect();
        let mb = self.minibatches.min(states.len());
        let mut history = Vec::with_capacity(self.epochs);
        for _ in 0..self.epochs {
            order.shuffle(&mut self.rng);
            for chunk in split_even(&order, mb) {
                let mut grad = GradientBuffer::zeros(self.net.params().len());
                let scale = 2.0 / chunk.len() as f64;
                for &i in chunk {
                    let v = self.net.value(states[i])?;
                    // descent on MSE expressed as ascent on its negation
                    self.net
                        .accumulate_value_grad(states[i], -scale * (v - targets[i]), &mut grad)?;
                }
                adam_step(self.net.params_mut(), &grad, self.lr, &mut self.adam)?;
            }
            history.push(self.loss(states, targets)?);
        }
        Ok(history)
    }
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
pub(crate) fn split_even<T>(items: &[T], parts: usize) -> Vec<&[T]> {
    let parts = parts.max(1).min(items.len().max(1));
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// GAE value targets `A_t + V_old(s_t)` for every step, in trajectory order.
pub fn value_targets(
    fit: &ValueNetworkFit,
    trajs: &[Trajectory],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut states = Vec::new();
    let mut targets = Vec::new();
    for traj in trajs {
        let s = traj.states();
        let v = fit.values(&s)?;
        let adv = compute_gae(traj, &v, gamma, lambda)?;
        targets.extend(adv.iter().zip(&v).map(|(a, v)| a + v));
        states.extend(s);
    }
    Ok((states, targets))
}

/// Computes GAE targets with the current network and regresses onto them.
/// Returns the per-epoch loss history.
pub fn fit_value(fit: &mut ValueNetworkFit, trajs: &[Trajectory], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let (states, targets) = value_targets(fit, trajs, gamma, lambda)?;
    fit.fit_targets(&states, &targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepRecord {
    traj_id: usize,
    step: usize,
    state: usize,
    action: usize,
    reward: f64,
    behavior_logp: f64,
    done: bool,
    bootstrap_value: f64,
}

pub fn write_batch_csv<W: Write>(trajs: &[Trajectory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (traj_id, traj) in trajs.iter().enumerate() {
        for (step, s) in traj.steps.iter().enumerate() {
            w.serialize(StepRecord {
                traj_id,
                step,
                state: s.state,
                action: s.action,
                reward: s.reward,
                behavior_logp: s.behavior_logp,
                done: s.done,
                bootstrap_value: traj.bootstrap_value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch_csv<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_reader(input);
    let mut trajs: Vec<Trajectory> = Vec::new();
    for rec in r.deserialize() {
        let rec: StepRecord = rec?;
        if rec.traj_id == trajs.len() {
            trajs.push(Trajectory::new(Vec::new(), rec.bootstrap_value));
        } else if rec.traj_id + 1 != trajs.len() {
            return Err(Error::Config(format!("trajectory id {} out of order", rec.traj_id)));
        }
        let traj = trajs.last_mut().expect("pushed above");
        if rec.step != traj.steps.len() {
            return Err(Error::Config(format!(
                "step {} out of order in trajectory {}",
                rec.step, rec.traj_id
            )));
        }
        traj.steps.push(Step {
            state: rec.state,
            action: rec.action,
            reward: rec.reward,
            behavior_logp: rec.behavior_logp,
            done: rec.done,
        });
    }
    Ok(trajs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(state: usize, reward: f64, done: bool) -> Step {
        Step {
            state,
            action: 0,
            reward,
            behavior_logp: -0.5,
            done,
        }
    }

    #[test]
    fn lambda_zero_is_td_residual() {
        let traj = Trajectory::new(
            vec![step(0, 1.0, false), step(1, 2.0, false), step(2, -1.0, false)],
            4.0,
        );
        let v = [0.5, -0.25, 1.5];
        let adv = compute_gae(&traj, &v, 0.9, 0.0).unwrap();
        assert_eq!(adv[0], 1.0 + 0.9 * -0.25 - 0.5);
        assert_eq!(adv[1], 2.0 + 0.9 * 1.5 + 0.25);
        assert_eq!(adv[2], -1.0 + 0.9 * 4.0 - 1.5);
    }

    #[test]
    fn lambda_one_zero_values_is_return() {
        let traj = Trajectory::new(vec![step(0, 1.0, false), step(1, 2.0, false), step(2, 3.0, true)], 99.0);
        let adv = compute_gae(&traj, &[0.0; 3], 0.5, 1.0).unwrap();
        assert_eq!(adv, vec![1.0 + 0.5 * 2.0 + 0.25 * 3.0, 2.0 + 1.5, 3.0]);
        assert_eq!(adv, traj.returns(0.5));
    }

    #[test]
    fn length_mismatch_is_error() {
        let traj = Trajectory::new(vec![step(0, 1.0, false)], 0.0);
        assert!(compute_gae(&traj, &[0.0, 1.0], 0.9, 0.9).is_err());
    }

    #[test]
    fn pair_counts() {
        let one = Trajectory::new(vec![step(0, 0.0, true)], 0.0);
        assert!(extract_pairs(&one, &[0.0]).is_empty());
        let five = Trajectory::new((0..5).map(|i| step(i, 0.0, i == 4)).collect(), 0.0);
        assert_eq!(extract_pairs(&five, &[0.0; 5]).len(), 4);
        let mut steps: Vec<Step> = (0..3).map(|i| step(i, 0.0, i == 2)).collect();
        steps.extend((0..2).map(|i| step(i, 0.0, i == 1)));
        let joined = Trajectory::new(steps, 0.0);
        let pairs = extract_pairs(&joined, &[0.0; 5]);
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.index != 2));
    }

    #[test]
    fn normalization_moments() {
        let mut adv = vec![1.0, 5.0, -3.0, 2.5, 0.0];
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!((std - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn split_even_sizes() {
        let v: Vec<usize> = (0..10).collect();
        let parts = split_even(&v, 4);
        assert_eq!(parts.iter().map(|p| p.len()).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        assert_eq!(parts.concat(), v);
    }

    #[test]
    fn batch_csv_roundtrip() {
        let trajs = vec![
            Trajectory::new(vec![step(3, -1.0, false), step(4, 0.1 + 0.2, true)], 0.0),
            Trajectory::new(vec![step(7, 1e-17, false)], -2.75),
        ];
        let mut buf = Vec::new();
        write_batch_csv(&trajs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("traj_id,step,state,action,reward,behavior_logp,done,bootstrap_value\n"));
        assert_eq!(read_batch_csv(buf.as_slice()).unwrap(), trajs);
    }
}
