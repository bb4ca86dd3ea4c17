//! Clipped surrogate objectives: the single-ratio PPO term, the two-ratio
//! reflective pair term, its three-ratio and joint-clip variants, and the
//! combined minibatch objective with its exact ascent gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::advantage::{Trajectory, TransitionPair};
use crate::error::{Error, Result};
use crate::policy::{GradientBuffer, PolicyNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ppo")]
    Ppo,
    #[serde(rename = "rpo")]
    Rpo,
    #[serde(rename = "rpo3")]
    Rpo3,
    #[serde(rename = "rpo-jointclip")]
    RpoJointClip,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ppo, Variant::Rpo, Variant::Rpo3, Variant::RpoJointClip];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ppo => "ppo",
            Variant::Rpo => "rpo",
            Variant::Rpo3 => "rpo3",
            Variant::RpoJointClip => "rpo-jointclip",
        }
    }

    /// Number of chained ratios in the auxiliary term.
    pub fn k(self) -> usize {
        match self {
            Variant::Rpo3 => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Variant::Ppo),
            "rpo" => Ok(Variant::Rpo),
            "rpo3" => Ok(Variant::Rpo3),
            "rpo-jointclip" | "rpo_jointclip" => Ok(Variant::RpoJointClip),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected ppo, rpo, rpo3 or rpo-jointclip)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// Clip range of the current-step ratio.
    pub epsilon: f64,
    /// Clip range of the successor ratios.
    pub epsilon1: f64,
    /// Weight of the auxiliary term.
    pub beta: f64,
    pub variant: Variant,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            epsilon1: 0.1,
            beta: 3.0,
            variant: Variant::Rpo,
        }
    }
}

impl ClipConfig {
    pub fn k(&self) -> usize {
        self.variant.k()
    }

    /// `β = 0` is accepted so that the combined objective can be reduced to the PPO term.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("epsilon1", self.epsilon1)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter {
                    name,
                    detail: format!("{v} not in (0, 1)"),
                });
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "beta",
                detail: format!("{} must be finite and non-negative", self.beta),
            });
        }
        Ok(())
    }
}

fn clip(x: f64, eps: f64) -> f64 {
    x.clamp(1.0 - eps, 1.0 + eps)
}

/// Derivative of `clip(x, eps)`; one on the closed interval.
fn clip_slope(x: f64, eps: f64) -> f64 {
    if (1.0 - eps..=1.0 + eps).contains(&x) {
        1.0
    } else {
        0.0
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !r.is_finite() {
        return Err(Error::NonFinite { what: "ratio".into() });
    }
    if r <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "ratio",
            detail: format!("{r} must be positive"),
        });
    }
    Ok(())
}

fn check_adv(a: f64) -> Result<()> {
    if !a.is_finite() {
        return Err(Error::NonFinite {
            what: "advantage".into(),
        });
    }
    Ok(())
}

/// Value of a min/clip term, its partial derivatives in each ratio, and
/// whether the clipped branch was strictly selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermEval<const N: usize> {
    pub value: f64,
    pub d_ratio: [f64; N],
    pub clipped: bool,
}

/// Shared min/clip logic for `min(Π r_i · A, Π clip(r_i, e_i) · A)`. On a tie
/// the unclipped branch supplies the gradient.
fn product_term<const N: usize>(ratios: [f64; N], eps: [f64; N], adv: f64) -> Result<TermEval<N>> {
    for r in ratios {
        check_ratio(r)?;
    }
    check_adv(adv)?;
    let clipped_r: [f64; N] = std::array::from_fn(|i| clip(ratios[i], eps[i]));
    let unclipped = ratios.iter().product::<f64>() * adv;
    let clipped = clipped_r.iter().product::<f64>() * adv;
    if unclipped <= clipped {
        let d_ratio = std::array::from_fn(|i| (0..N).filter(|&j| j != i).map(|j| ratios[j]).product::<f64>() * adv);
        Ok(TermEval {
            value: unclipped,
            d_ratio,
            clipped: false,
        })
    } else {
        let d_ratio = std::array::from_fn(|i| {
            clip_slope(ratios[i], eps[i]) * (0..N).filter(|&j| j != i).map(|j| clipped_r[j]).product::<f64>() * adv
        });
        Ok(TermEval {
            value: clipped,
            d_ratio,
            clipped: true,
        })
    }
}

pub fn ppo_term_eval(ratio: f64, adv: f64, epsilon: f64) -> Result<TermEval<1>> {
    product_term([ratio], [epsilon], adv)
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn ppo_term(ratio: f64, adv: f64, epsilon: f64) -> Result<f64> {
    Ok(ppo_term_eval(ratio, adv, epsilon)?.value)
}

pub fn rpo_pair_eval(ratio: f64, ratio_next: f64, adv_next: f64, epsilon: f64, epsilon1: f64) -> Result<TermEval<2>> {
    product_term([ratio, ratio_next], [epsilon, epsilon1], adv_next)
}

/// `min(r·r′·A′, clip(r, ε)·clip(r′, ε₁)·A′)` with each ratio clipped separately.
pub fn rpo_pair_term(ratio: f64, ratio_next: f64, adv_next: f64, epsilon: f64, epsilon1: f64) -> Result<f64> {
    Ok(rpo_pair_eval(ratio, ratio_next, adv_next, epsilon, epsilon1)?.value)
}

pub fn jointclip_pair_eval(ratio: f64, ratio_next: f64, adv_next: f64, epsilon: f64) -> Result<TermEval<2>> {
    check_ratio(ratio)?;
    check_ratio(ratio_next)?;
    let inner = product_term([ratio * ratio_next], [epsilon], adv_next)?;
    let g = inner.d_ratio[0];
    Ok(TermEval {
        value: inner.value,
        d_ratio: [g * ratio_next, g * ratio],
        clipped: inner.clipped,
    })
}

/// `min(r·r′·A′, clip(r·r′, 1−ε, 1+ε)·A′)` with the product clipped as one ratio.
pub fn jointclip_pair_term(ratio: f64, ratio_next: f64, adv_next: f64, epsilon: f64) -> Result<f64> {
    Ok(jointclip_pair_eval(ratio, ratio_next, adv_next, epsilon)?.value)
}

pub fn rpo3_eval(r0: f64, r1: f64, r2: f64, adv2: f64, epsilon: f64, epsilon1: f64) -> Result<TermEval<3>> {
    product_term([r0, r1, r2], [epsilon, epsilon1, epsilon1], adv2)
}

/// Three-ratio analogue of the pair term, anchored at the advantage two steps ahead.
pub fn rpo3_term(r0: f64, r1: f64, r2: f64, adv2: f64, epsilon: f64, epsilon1: f64) -> Result<f64> {
    Ok(rpo3_eval(r0, r1, r2, adv2, epsilon, epsilon1)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub state: usize,
    pub action: usize,
    pub behavior_logp: f64,
    pub adv: f64,
}

/// Flattened training batch; `next[i]` links a step to its in-episode successor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub samples: Vec<Sample>,
    pub next: Vec<Option<usize>>,
}

impl Batch {
    /// Concatenates trajectories; successors never cross a `done` flag or a
    /// trajectory boundary.
    pub fn from_trajectories(trajs: &[Trajectory], advantages: &[Vec<f64>]) -> Result<Self> {
        if trajs.len() != advantages.len() {
            return Err(Error::Dimension {
                axis: "advantage lists",
                expected: trajs.len(),
                got: advantages.len(),
            });
        }
        let mut batch = Batch::default();
        for (traj, adv) in trajs.iter().zip(advantages) {
            if adv.len() != traj.steps.len() {
                return Err(Error::Dimension {
                    axis: "advantages",
                    expected: traj.steps.len(),
                    got: adv.len(),
                });
            }
            let offset = batch.samples.len();
            for (t, (step, &a)) in traj.steps.iter().zip(adv).enumerate() {
                batch.samples.push(Sample {
                    state: step.state,
                    action: step.action,
                    behavior_logp: step.behavior_logp,
                    adv: a,
                });
                let has_next = !step.done && t + 1 < traj.steps.len();
                batch.next.push(has_next.then_some(offset + t + 1));
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Chain of `k` consecutive indices starting at `i`, if the episode is long enough.
    pub fn chain(&self, i: usize, k: usize) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(k);
        out.push(i);
        let mut cur = i;
        for _ in 1..k {
            cur = self.next[cur]?;
            out.push(cur);
        }
        Some(out)
    }

    /// Pairs with batch-global indices.
    pub fn pairs(&self) -> Vec<TransitionPair> {
        (0..self.len())
            .filter_map(|i| {
                let j = self.next[i]?;
                let (p, q) = (&self.samples[i], &self.samples[j]);
                Some(TransitionPair {
                    index: i,
                    s: p.state,
                    a: p.action,
                    s_next: q.state,
                    a_next: q.action,
                    adv: p.adv,
                    adv_next: q.adv,
                    behavior_logp: p.behavior_logp,
                    behavior_logp_next: q.behavior_logp,
                })
            })
            .collect()
    }
}

/// Objective value, its components and the ascent gradient for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    /// `clip0 + β·clip1` for the auxiliary variants, `clip0` for PPO.
    pub value: f64,
    /// Mean single-ratio term over the minibatch steps.
    pub clip0: f64,
    /// Mean auxiliary term over anchored chains (reported for PPO as a diagnostic).
    pub clip1: f64,
    pub clipfrac0: f64,
    pub clipfrac1: f64,
    pub n_chains: usize,
    /// The auxiliary term had no chains and was dropped.
    pub degraded: bool,
    /// Largest `|ratio − 1|` seen among the minibatch steps and their successors.
    pub max_ratio_dev: f64,
    pub grad: GradientBuffer,
}

/// Evaluates the combined objective over the steps in `indices` (all steps
/// when `None`). Ratios are `exp(logp − behavior_logp)`; each auxiliary chain
/// is anchored at a minibatch step and reads successor ratios from the batch.
pub fn full_objective(
    batch: &Batch,
    net: &PolicyNetwork,
    config: &ClipConfig,
    indices: Option<&[usize]>,
) -> Result<ObjectiveOutput> {
    config.validate()?;
    let all: Vec<usize>;
    let idx = match indices {
        Some(idx) => idx,
        None => {
            all = (0..batch.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(Error::InvalidParameter {
            name: "batch",
            detail: "objective needs at least one step".into(),
        });
    }
    let n_states = net.architecture().n_inputs;
    let n_actions = net.n_actions();
    let k = config.k();

    let mut probs: Vec<Option<Vec<f64>>> = vec![None; n_states];
    let mut ratios = vec![f64::NAN; batch.len()];
    let mut ratio_of = |i: usize, probs: &mut Vec<Option<Vec<f64>>>| -> Result<f64> {
        if ratios[i].is_nan() {
            let s = &batch.samples[i];
            if probs[s.state].is_none() {
                probs[s.state] = Some(net.forward(s.state)?);
            }
            let p = probs[s.state].as_ref().expect("filled above")[s.action];
            let r = (p.ln() - s.behavior_logp).exp();
            if !r.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("ratio at batch index {i}"),
                });
            }
            ratios[i] = r;
        }
        Ok(ratios[i])
    };

    // dJ/dr accumulated per batch index
    let mut d_ratio = vec![0.0; batch.len()];
    let mut max_dev: f64 = 0.0;

    let mut sum0 = 0.0;
    let mut clipped0 = 0usize;
    let w0 = 1.0 / idx.len() as f64;
    for &i in idx {
        let r = ratio_of(i, &mut probs)?;
        max_dev = max_dev.max((r - 1.0).abs());
        let t = ppo_term_eval(r, batch.samples[i].adv, config.epsilon)?;
        sum0 += t.value;
        clipped0 += usize::from(t.clipped);
        d_ratio[i] += w0 * t.d_ratio[0];
    }

    let chains: Vec<Vec<usize>> = idx.iter().filter_map(|&i| batch.chain(i, k)).collect();
    let mut sum1 = 0.0;
    let mut clipped1 = 0usize;
    let mut aux_grads: Vec<(usize, f64)> = Vec::with_capacity(chains.len() * k);
    for chain in &chains {
        let rs = chain
            .iter()
            .map(|&j| ratio_of(j, &mut probs))
            .collect::<Result<Vec<f64>>>()?;
        for r in &rs {
            max_dev = max_dev.max((r - 1.0).abs());
        }
        let adv_last = batch.samples[*chain.last().expect("non-empty chain")].adv;
        let (value, d, clipped) = match config.variant {
            Variant::Rpo3 => {
                let t = rpo3_eval(rs[0], rs[1], rs[2], adv_last, config.epsilon, config.epsilon1)?;
                (t.value, t.d_ratio.to_vec(), t.clipped)
            }
            Variant::RpoJointClip => {
                let t = jointclip_pair_eval(rs[0], rs[1], adv_last, config.epsilon)?;
                (t.value, t.d_ratio.to_vec(), t.clipped)
            }
            Variant::Ppo | Variant::Rpo => {
                let t = rpo_pair_eval(rs[0], rs[1], adv_last, config.epsilon, config.epsilon1)?;
                (t.value, t.d_ratio.to_vec(), t.clipped)
            }
        };
        sum1 += value;
        clipped1 += usize::from(clipped);
        for (&j, g) in chain.iter().zip(d) {
            aux_grads.push((j, g));
        }
    }

    let n_chains = chains.len();
    let clip0 = sum0 * w0;
    let clip1 = if n_chains > 0 { sum1 / n_chains as f64 } else { 0.0 };
    let use_aux = config.variant != Variant::Ppo && n_chains > 0;
    let degraded = config.variant != Variant::Ppo && n_chains == 0;
    if degraded {
        log::warn!("no consecutive steps in minibatch; auxiliary term dropped");
    }
    if use_aux {
        let w1 = config.beta / n_chains as f64;
        for (j, g) in aux_grads {
            d_ratio[j] += w1 * g;
        }
    }

    // ∂J/∂θ = Σ_i (∂J/∂r_i) · r_i · ∇ log π(a_i|s_i), grouped by state
    let mut coeff = vec![0.0; n_states * n_actions];
    let mut touched = vec![false; n_states];
    for (i, &d) in d_ratio.iter().enumerate() {
        if d != 0.0 {
            let s = &batch.samples[i];
            coeff[s.state * n_actions + s.action] += d * ratios[i];
            touched[s.state] = true;
        }
    }
    let mut grad = GradientBuffer::zeros(net.params().len());
    for s in (0..n_states).filter(|&s| touched[s]) {
        net.accumulate_log_prob_grads(s, &coeff[s * n_actions..(s + 1) * n_actions], &mut grad)?;
    }

    let value = if use_aux { clip0 + config.beta * clip1 } else { clip0 };
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "objective value".into(),
        });
    }
    Ok(ObjectiveOutput {
        value,
        clip0,
        clip1,
        clipfrac0: clipped0 as f64 * w0,
        clipfrac1: if n_chains > 0 {
            clipped1 as f64 / n_chains as f64
        } else {
            0.0
        },
        n_chains,
        degraded,
        max_ratio_dev: max_dev,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppo_cases() {
        assert!((ppo_term(1.5, 1.0, 0.2).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(ppo_term(1.0, -3.7, 0.2).unwrap(), -3.7);
        assert!((ppo_term(0.5, -1.0, 0.2).unwrap() + 0.8).abs() < 1e-15);
    }

    #[test]
    fn pair_cases() {
        assert!((rpo_pair_term(1.5, 0.8, -1.0, 0.2, 0.1).unwrap() + 1.2).abs() < 1e-15);
        assert_eq!(rpo_pair_term(1.0, 1.0, 0.7, 0.2, 0.1).unwrap(), 0.7);
        assert_eq!(rpo_pair_term(3.0, 0.2, 0.0, 0.2, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn jointclip_cases() {
        assert!((jointclip_pair_term(1.5, 0.8, 1.0, 0.2).unwrap() - 1.2).abs() < 1e-12);
        assert!((jointclip_pair_term(1.3, 0.5, 1.0, 0.2).unwrap() - 0.65).abs() < 1e-15);
        assert_eq!(jointclip_pair_term(1.0, 1.0, -0.4, 0.2).unwrap(), -0.4);
    }

    #[test]
    fn rpo3_cases() {
        assert_eq!(rpo3_term(1.0, 1.0, 1.0, 0.3, 0.2, 0.1).unwrap(), 0.3);
        assert_eq!(rpo3_term(1.7, 0.4, 2.0, 0.0, 0.2, 0.1).unwrap(), 0.0);
        assert!((rpo3_term(1.5, 1.0, 1.0, 1.0, 0.2, 0.1).unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs() {
        assert!(ppo_term(f64::NAN, 1.0, 0.2).is_err());
        assert!(ppo_term(0.0, 1.0, 0.2).is_err());
        assert!(rpo_pair_term(1.0, 1.0, f64::INFINITY, 0.2, 0.1).is_err());
        assert!(jointclip_pair_term(-1.0, 1.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn clipped_branch_kills_gradient() {
        let t = ppo_term_eval(1.5, 1.0, 0.2).unwrap();
        assert!(t.clipped);
        assert_eq!(t.d_ratio, [0.0]);
        let p = rpo_pair_eval(1.5, 1.5, 1.0, 0.2, 0.1).unwrap();
        assert!(p.clipped);
        assert_eq!(p.d_ratio, [0.0, 0.0]);
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("trpo".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ClipConfig::default().validate().is_ok());
        let bad = ClipConfig {
            epsilon: 1.0,
            ..ClipConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero_beta = ClipConfig {
            beta: 0.0,
            ..ClipConfig::default()
        };
        assert!(zero_beta.validate().is_ok());
    }
}
