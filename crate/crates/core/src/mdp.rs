//! Exact finite MDPs: policy evaluation, discounted visitation distributions
//! and the performance-difference identity.
//!
//! Every quantity here is obtained by a direct dense linear solve. The state
//! spaces involved are tiny (theory sweeps stay below 24 state-action pairs,
//! the CliffWalking encoding has 48 states), so LU on a dense matrix is both
//! exact to rounding and fast.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating probability vectors at construction time.
pub const CONSTRUCTION_TOL: f64 = 1e-12;

/// A finite, discounted MDP with dense transition and reward tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[state][action][next_state]`.
    transition: Vec<f64>,
    /// Row-major `[state][action]`.
    reward: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
}

fn check_distribution(what: impl Fn() -> String, probs: &[f64]) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDistribution {
            what: what(),
            detail: format!("entry {p} is negative or non-finite"),
        });
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > CONSTRUCTION_TOL {
        return Err(Error::InvalidDistribution {
            what: what(),
            detail: format!("sums to {total}"),
        });
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidParameter {
                name: "n_states",
                detail: "must be positive".into(),
            });
        }
        if n_actions == 0 {
            return Err(Error::InvalidParameter {
                name: "n_actions",
                detail: "must be positive".into(),
            });
        }
        let expect = |axis, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Dimension { axis, expected, got })
            }
        };
        expect("transition", n_states * n_actions * n_states, transition.len())?;
        expect("reward", n_states * n_actions, reward.len())?;
        expect("initial_dist", n_states, initial_dist.len())?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                detail: format!("{gamma} is outside [0, 1)"),
            });
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("reward entry {r}"),
            });
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let start = (s * n_actions + a) * n_states;
                check_distribution(|| format!("transition[{s}][{a}]"), &transition[start..start + n_states])?;
            }
        }
        check_distribution(|| "initial_dist".into(), &initial_dist)?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Successor distribution `P(· | s, a)`.
    pub fn next_dist(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.n_actions + action) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition[(state * self.n_actions + action) * self.n_states + next]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state * self.n_actions + action]
    }

    /// `max_{s,a} |R(s,a)|`.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Same dynamics and rewards, different start distribution.
    pub fn with_initial_dist(mut self, initial_dist: Vec<f64>) -> Result<Self> {
        if initial_dist.len() != self.n_states {
            return Err(Error::Dimension {
                axis: "initial_dist",
                expected: self.n_states,
                got: initial_dist.len(),
            });
        }
        check_distribution(|| "initial_dist".into(), &initial_dist)?;
        self.initial_dist = initial_dist;
        Ok(self)
    }

    /// Same dynamics and rewards, different discount.
    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition,
            self.reward,
            gamma,
            self.initial_dist,
        )
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states {
            return Err(Error::Dimension {
                axis: "policy states",
                expected: self.n_states,
                got: policy.n_states(),
            });
        }
        if policy.n_actions() != self.n_actions {
            return Err(Error::Dimension {
                axis: "policy actions",
                expected: self.n_actions,
                got: policy.n_actions(),
            });
        }
        Ok(())
    }

    /// State-to-state transition matrix under `policy`.
    fn policy_transition(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let n = self.n_states;
        DMatrix::from_fn(n, n, |s, next| {
            (0..self.n_actions)
                .map(|a| policy.prob(s, a) * self.prob(s, a, next))
                .sum()
        })
    }

    fn policy_reward(&self, policy: &TabularPolicy) -> DVector<f64> {
        DVector::from_fn(self.n_states, |s, _| {
            (0..self.n_actions).map(|a| policy.prob(s, a) * self.reward(s, a)).sum()
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: MdpDocument = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        doc.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&MdpDocument::from(self)).expect("MDP document always serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// On-disk layout of a [`TabularMdp`]: flat row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
}

impl From<&TabularMdp> for MdpDocument {
    fn from(mdp: &TabularMdp) -> Self {
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            initial_dist: mdp.initial_dist.clone(),
            transition: mdp.transition.clone(),
            reward: mdp.reward.clone(),
        }
    }
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        TabularMdp::new(
            doc.n_states,
            doc.n_actions,
            doc.transition,
            doc.reward,
            doc.gamma,
            doc.initial_dist,
        )
    }
}

/// A stochastic policy stored as a dense `[state][action]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension {
                axis: "policy table",
                expected: n_states * n_actions,
                got: probs.len(),
            });
        }
        for s in 0..n_states {
            check_distribution(|| format!("policy row {s}"), &probs[s * n_actions..(s + 1) * n_actions])?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_actions) {
            return Err(Error::Dimension {
                axis: "policy row",
                expected: n_actions,
                got: bad.len(),
            });
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy picking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidAction { action: a, n_actions });
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `(1 - t) * self + t * other`, row by row.
    pub fn mix(&self, other: &TabularPolicy, t: f64) -> Result<Self> {
        if other.n_states != self.n_states || other.n_actions != self.n_actions {
            return Err(Error::Dimension {
                axis: "policy table",
                expected: self.probs.len(),
                got: other.probs.len(),
            });
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (1.0 - t) * p + t * q)
            .collect();
        Ok(Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs,
        })
    }

    /// Index of the most likely action in `state` (lowest index on ties).
    pub fn argmax(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = a;
            }
        }
        best
    }
}

/// `V^π`, `Q^π` and `A^π` for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle {
    n_actions: usize,
    pub v: Vec<f64>,
    /// Row-major `[state][action]`.
    pub q: Vec<f64>,
    /// Row-major `[state][action]`, `q - v` broadcast over actions.
    pub adv: Vec<f64>,
}

impl ValueBundle {
    pub fn q(&self, state: usize, action: usize) -> f64 {
        self.q[state * self.n_actions + action]
    }

    pub fn adv(&self, state: usize, action: usize) -> f64 {
        self.adv[state * self.n_actions + action]
    }
}

/// Solves the Bellman equation `V = R_π + γ P_π V` directly.
pub fn solve_values(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<ValueBundle> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let p_pi = mdp.policy_transition(policy);
    let system = DMatrix::identity(n, n) - p_pi * mdp.gamma;
    let v = system
        .lu()
        .solve(&mdp.policy_reward(policy))
        .expect("I - γP is nonsingular for γ < 1");

    let na = mdp.n_actions;
    let mut q = vec![0.0; n * na];
    let mut adv = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let cont: f64 = mdp.next_dist(s, a).iter().zip(v.iter()).map(|(p, vn)| p * vn).sum();
            let qa = mdp.reward(s, a) + mdp.gamma * cont;
            q[s * na + a] = qa;
            adv[s * na + a] = qa - v[s];
        }
    }
    Ok(ValueBundle {
        n_actions: na,
        v: v.iter().copied().collect(),
        q,
        adv,
    })
}

/// Expected discounted return from the start distribution, `Σ_s ρ₀(s) V^π(s)`.
pub fn eta(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    let values = solve_values(mdp, policy)?;
    Ok(mdp.initial_dist.iter().zip(&values.v).map(|(p, v)| p * v).sum())
}

/// Normalized discounted visitation distributions of one policy.
///
/// The conditional distribution `ρ^π(·,· | s, a)` (start from the successor
/// distribution of `(s, a)`, then follow π) is built per anchor on demand from
/// the `S × S` occupancy kernel `(1-γ)(I - γP_π)⁻¹`.
#[derive(Debug, Clone)]
pub struct VisitationBundle {
    n_states: usize,
    n_actions: usize,
    pub state_dist: Vec<f64>,
    /// Row-major `[state][action]`.
    pub state_action_dist: Vec<f64>,
    /// Row `x` is the discounted state occupancy when starting in `x`.
    occupancy: DMatrix<f64>,
    policy: TabularPolicy,
    successors: Vec<f64>,
}

impl VisitationBundle {
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// `ρ^π(s' | s, a)` over next states.
    pub fn conditional_states(&self, state: usize, action: usize) -> Vec<f64> {
        let n = self.n_states;
        let start = (state * self.n_actions + action) * n;
        let succ = &self.successors[start..start + n];
        (0..n)
            .map(|target| {
                succ.iter()
                    .enumerate()
                    .map(|(x, p)| p * self.occupancy[(x, target)])
                    .sum()
            })
            .collect()
    }

    /// `ρ^π(s', a' | s, a)` as a flat `[state][action]` vector.
    pub fn conditional(&self, state: usize, action: usize) -> Vec<f64> {
        let states = self.conditional_states(state, action);
        let mut out = Vec::with_capacity(self.n_pairs());
        for (s, ps) in states.iter().enumerate() {
            out.extend(self.policy.row(s).iter().map(|pa| ps * pa));
        }
        out
    }

    /// All conditional distributions stacked: row `(s,a)` is `ρ^π(·,· | s, a)`.
    pub fn conditional_matrix(&self) -> DMatrix<f64> {
        let n = self.n_pairs();
        let mut m = DMatrix::zeros(n, n);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.conditional(s, a);
                for (col, value) in row.into_iter().enumerate() {
                    m[(s * self.n_actions + a, col)] = value;
                }
            }
        }
        m
    }
}

/// Discounted visitation via `(I - γ P_πᵀ) d = (1-γ) ρ₀`.
pub fn visitations(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<VisitationBundle> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let g = mdp.gamma;
    let system = DMatrix::identity(n, n) - mdp.policy_transition(policy) * g;
    let lu = system.clone().lu();
    let occupancy = lu.try_inverse().expect("I - γP is nonsingular for γ < 1") * (1.0 - g);
    let rho0 = DVector::from_column_slice(&mdp.initial_dist) * (1.0 - g);
    let state_dist = system
        .transpose()
        .lu()
        .solve(&rho0)
        .expect("I - γPᵀ is nonsingular for γ < 1");
    let na = mdp.n_actions;
    let mut state_action_dist = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            state_action_dist[s * na + a] = state_dist[s] * policy.prob(s, a);
        }
    }
    Ok(VisitationBundle {
        n_states: n,
        n_actions: na,
        state_dist: state_dist.iter().copied().collect(),
        state_action_dist,
        occupancy,
        policy: policy.clone(),
        successors: mdp.transition.clone(),
    })
}

/// Both sides of `η(π) - η(π̂) = 1/(1-γ) E_{ρ^π}[A^π̂]`.
pub fn performance_difference_check(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_hat: &TabularPolicy,
) -> Result<(f64, f64)> {
    let lhs = eta(mdp, pi)? - eta(mdp, pi_hat)?;
    let visit = visitations(mdp, pi)?;
    let values_hat = solve_values(mdp, pi_hat)?;
    let expectation: f64 = visit
        .state_action_dist
        .iter()
        .zip(&values_hat.adv)
        .map(|(p, a)| p * a)
        .sum();
    Ok((lhs, expectation / (1.0 - mdp.gamma)))
}

/// Howard policy iteration; returns an optimal deterministic policy and its values.
///
/// Ties in the greedy step keep the current action, then fall back to the
/// lowest action index, so the result is deterministic.
pub fn policy_iteration(mdp: &TabularMdp) -> Result<(TabularPolicy, ValueBundle)> {
    let n = mdp.n_states;
    let na = mdp.n_actions;
    let mut actions = vec![0usize; n];
    loop {
        let policy = TabularPolicy::deterministic(na, &actions)?;
        let values = solve_values(mdp, &policy)?;
        let mut stable = true;
        for (s, current) in actions.iter_mut().enumerate() {
            let mut best = *current;
            for a in 0..na {
                if values.q(s, a) > values.q(s, best) + 1e-10 {
                    best = a;
                }
            }
            if best != *current {
                *current = best;
                stable = false;
            }
        }
        if stable {
            return Ok((policy, values));
        }
    }
}
