//! Randomized verification battery: every identity and bound from
//! [`crate::theory`] evaluated on random MDPs and policy pairs.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, random_mdp, random_policy};
use crate::error::{Error, Result};
use crate::mdp::{performance_difference_check, solve_values, TabularMdp, TabularPolicy};
use crate::theory::{
    decomposition_from_report, psi_membership_from_chain, residual_bound, surrogate_report_from_chain, taypo_bounds,
    tv_distance, PairChain, MAX_HORIZON, PSI_RADIUS,
};

/// Absolute tolerance on exact identities.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Slack on one-sided bounds.
pub const BOUND_SLACK: f64 = 1e-12;

pub const TAYPO_GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
pub const TAYPO_EPSILONS: [f64; 2] = [0.01, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
    pub k_list: Vec<usize>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Candidate policies drawn per instance for the solution-set inclusion check.
    pub psi_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            seed: 0,
            max_states: 6,
            max_actions: 4,
            k_list: vec![1, 2, 3],
            gamma_min: 0.5,
            gamma_max: 0.95,
            psi_samples: 500,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("need at least one instance".into()));
        }
        if self.max_states < 2 || self.max_actions < 2 {
            return Err(Error::Config("need at least 2 states and 2 actions".into()));
        }
        if let Some(&k) = self.k_list.iter().find(|&&k| k == 0 || k > MAX_HORIZON) {
            return Err(Error::HorizonOutOfRange {
                k,
                min: 1,
                max: MAX_HORIZON,
            });
        }
        if !(0.0 < self.gamma_min && self.gamma_min <= self.gamma_max && self.gamma_max < 1.0) {
            return Err(Error::Config(format!(
                "gamma range [{}, {}] must lie inside (0, 1)",
                self.gamma_min, self.gamma_max
            )));
        }
        Ok(())
    }
}

/// One evaluated check. For bounds `lhs ≤ rhs_or_bound` is required; for
/// identities `|lhs − rhs_or_bound| ≤` [`IDENTITY_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub instance_seed: u64,
    pub check_name: String,
    pub lhs: f64,
    pub rhs_or_bound: f64,
    pub gap: f64,
    pub pass: bool,
}

impl CheckRow {
    fn identity(seed: u64, name: String, lhs: f64, rhs: f64) -> Self {
        let gap = (lhs - rhs).abs();
        Self {
            instance_seed: seed,
            check_name: name,
            lhs,
            rhs_or_bound: rhs,
            gap,
            pass: gap <= IDENTITY_TOL,
        }
    }

    /// Requires `lhs ≤ bound + slack`; `gap = bound − lhs`.
    fn upper(seed: u64, name: String, lhs: f64, bound: f64, slack: f64) -> Self {
        Self {
            instance_seed: seed,
            check_name: name,
            lhs,
            rhs_or_bound: bound,
            gap: bound - lhs,
            pass: lhs <= bound + slack,
        }
    }
}

/// Counts from the solution-set inclusion sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PsiCounts {
    pub samples: usize,
    pub in_psi1: usize,
    pub in_psi2: usize,
    /// In the two-term set but not the one-term set.
    pub violations: usize,
    /// In the one-term set but not the two-term set.
    pub witnesses: usize,
}

impl PsiCounts {
    fn add(&mut self, other: PsiCounts) {
        self.samples += other.samples;
        self.in_psi1 += other.in_psi1;
        self.in_psi2 += other.in_psi2;
        self.violations += other.violations;
        self.witnesses += other.witnesses;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<CheckRow>,
    pub psi: PsiCounts,
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Rows whose name starts with `prefix`.
    pub fn rows_named<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a CheckRow> {
        self.rows.iter().filter(move |r| r.check_name.starts_with(prefix))
    }
}

/// Every check on one `(π, π̂)` pair.
pub fn check_pair(
    seed: u64,
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_hat: &TabularPolicy,
    k_list: &[usize],
) -> Result<Vec<CheckRow>> {
    let gamma = mdp.gamma();
    let chain = PairChain::new(mdp, pi, pi_hat)?;
    let mut rows = Vec::new();
    let (lhs, rhs) = performance_difference_check(mdp, pi, pi_hat)?;
    rows.push(CheckRow::identity(seed, "performance_difference".into(), lhs, rhs));
    let (lhs, rhs) = chain.replacement_identity();
    rows.push(CheckRow::identity(seed, "replacement_identity".into(), lhs, rhs));
    for &k in k_list {
        let report = surrogate_report_from_chain(&chain, k)?;
        rows.push(CheckRow::identity(
            seed,
            format!("generalized_identity_k{k}"),
            report.eta_gap,
            report.generalized_surrogate_total(),
        ));
        let (lhs, bound) = residual_bound(&report, gamma);
        rows.push(CheckRow::upper(
            seed,
            format!("residual_bound_k{k}"),
            lhs,
            bound,
            BOUND_SLACK,
        ));
        // lower bound: −gap ≤ −bound
        let lb = report.lower_bound();
        rows.push(CheckRow {
            instance_seed: seed,
            check_name: format!("lower_bound_k{k}"),
            lhs: report.eta_gap,
            rhs_or_bound: lb,
            gap: report.eta_gap - lb,
            pass: report.eta_gap >= lb - BOUND_SLACK,
        });
        if k >= 2 {
            let app = decomposition_from_report(&report, gamma);
            rows.push(CheckRow::identity(
                seed,
                format!("decomposition_k{k}"),
                app.lhs,
                app.rhs,
            ));
            let h_max = app.h_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            rows.push(CheckRow::upper(
                seed,
                format!("h_bound_k{k}"),
                h_max,
                app.h_bound,
                BOUND_SLACK,
            ));
            rows.push(CheckRow::upper(
                seed,
                format!("g_bound_k{k}"),
                app.g_hat,
                app.g_bound,
                BOUND_SLACK,
            ));
        }
    }
    Ok(rows)
}

/// Greedy policy with respect to `A^π̂`.
fn greedy_policy(mdp: &TabularMdp, pi_hat: &TabularPolicy) -> Result<TabularPolicy> {
    let values = solve_values(mdp, pi_hat)?;
    let actions: Vec<usize> = (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions()).fold(0, |best, a| {
                if values.adv(s, a) > values.adv(s, best) {
                    a
                } else {
                    best
                }
            })
        })
        .collect();
    TabularPolicy::deterministic(mdp.n_actions(), &actions)
}

/// Draws `μ` within policy distance [`PSI_RADIUS`] of `π̂`: a mixture of `π̂`
/// toward either the greedy policy or a random one, with a log-uniform
/// mixing weight so that both near and far candidates appear.
pub fn sample_candidate<R: Rng + ?Sized>(
    pi_hat: &TabularPolicy,
    greedy: &TabularPolicy,
    rng: &mut R,
) -> Result<TabularPolicy> {
    let target = if rng.random_bool(0.5) {
        greedy.clone()
    } else {
        random_policy(pi_hat.n_states(), pi_hat.n_actions(), rng)
    };
    let d = tv_distance(&target, pi_hat)?;
    let t_max = if d > 0.0 { (PSI_RADIUS / d).min(1.0) } else { 1.0 };
    let t = t_max * 10f64.powf(-3.0 * rng.random::<f64>());
    pi_hat.mix(&target, t)
}

/// Inclusion sweep over `samples` candidates around `π̂`.
pub fn psi_sweep(mdp: &TabularMdp, pi_hat: &TabularPolicy, samples: usize, seed: u64) -> Result<PsiCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let greedy = greedy_policy(mdp, pi_hat)?;
    let mut counts = PsiCounts::default();
    for _ in 0..samples {
        let mu = sample_candidate(pi_hat, &greedy, &mut rng)?;
        let chain = PairChain::new(mdp, &mu, pi_hat)?;
        let (in1, in2) = psi_membership_from_chain(&chain);
        counts.samples += 1;
        counts.in_psi1 += usize::from(in1);
        counts.in_psi2 += usize::from(in2);
        counts.violations += usize::from(in2 && !in1);
        counts.witnesses += usize::from(in1 && !in2);
    }
    Ok(counts)
}

/// Random instance: sizes, discount, MDP and policy pair, all from `instance_seed`.
pub fn random_instance(config: &SweepConfig, instance_seed: u64) -> Result<(TabularMdp, TabularPolicy, TabularPolicy)> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let n_states = rng.random_range(2..=config.max_states);
    let n_actions = rng.random_range(2..=config.max_actions);
    let gamma = rng.random_range(config.gamma_min..=config.gamma_max);
    let mdp = random_mdp(derive_seed(instance_seed, 1), n_states, n_actions, gamma)?;
    let pi_hat = random_policy(n_states, n_actions, &mut rng);
    let other = random_policy(n_states, n_actions, &mut rng);
    let t: f64 = rng.random_range(0.0..=1.0);
    let pi = pi_hat.mix(&other, t)?;
    Ok((mdp, pi, pi_hat))
}

fn instance_rows(config: &SweepConfig, instance_seed: u64) -> Result<(Vec<CheckRow>, PsiCounts)> {
    let (mdp, pi, pi_hat) = random_instance(config, instance_seed)?;
    let mut rows = check_pair(instance_seed, &mdp, &pi, &pi_hat, &config.k_list)?;
    let psi = psi_sweep(&mdp, &pi_hat, config.psi_samples, derive_seed(instance_seed, 2))?;
    rows.push(CheckRow {
        instance_seed,
        check_name: "psi_inclusion".into(),
        lhs: psi.violations as f64,
        rhs_or_bound: 0.0,
        gap: -(psi.violations as f64),
        pass: psi.violations == 0,
    });
    Ok((rows, psi))
}

/// Residual-bound comparison on the fixed `(γ, ε, k)` grid; points where the
/// comparison bound is unbounded are skipped.
pub fn taypo_grid_rows(seed: u64, r_max: f64) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for gamma in TAYPO_GAMMAS {
        for eps in TAYPO_EPSILONS {
            for k in 1..=3 {
                if let Ok((rpo, taypo)) = taypo_bounds(gamma, eps, k, r_max) {
                    rows.push(CheckRow::upper(
                        seed,
                        format!("taypo_compare_g{gamma}_e{eps}_k{k}"),
                        rpo,
                        taypo,
                        0.0,
                    ));
                }
            }
        }
    }
    rows
}

/// Runs the battery over `config.instances` random instances. Instances run in
/// parallel and are merged in index order.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let per_instance = (0..config.instances)
        .into_par_iter()
        .map(|i| instance_rows(config, derive_seed(config.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut psi = PsiCounts::default();
    for (r, p) in per_instance {
        rows.extend(r);
        psi.add(p);
    }
    if config.psi_samples > 0 {
        rows.push(CheckRow {
            instance_seed: config.seed,
            check_name: "psi_strictness_witness".into(),
            lhs: psi.witnesses as f64,
            rhs_or_bound: 1.0,
            gap: psi.witnesses as f64 - 1.0,
            pass: psi.witnesses >= 1,
        });
    }
    rows.extend(taypo_grid_rows(config.seed, 1.0));
    Ok(SweepReport { rows, psi })
}

/// The battery on a fixed MDP with a random policy pair drawn from `seed`.
pub fn run_fixture(mdp: &TabularMdp, seed: u64, k_list: &[usize], psi_samples: usize) -> Result<SweepReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi_hat = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
    let other = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
    let pi = pi_hat.mix(&other, rng.random_range(0.0..=1.0))?;
    let mut rows = check_pair(seed, mdp, &pi, &pi_hat, k_list)?;
    let psi = psi_sweep(mdp, &pi_hat, psi_samples, derive_seed(seed, 2))?;
    rows.push(CheckRow {
        instance_seed: seed,
        check_name: "psi_inclusion".into(),
        lhs: psi.violations as f64,
        rhs_or_bound: 0.0,
        gap: -(psi.violations as f64),
        pass: psi.violations == 0,
    });
    rows.extend(taypo_grid_rows(seed, mdp.r_max()));
    Ok(SweepReport { rows, psi })
}

/// One accepted step of bound maximization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementStep {
    pub eta_before: f64,
    pub eta_after: f64,
    /// Lower bound of the accepted candidate relative to the previous policy.
    pub bound: f64,
}

/// Repeatedly replaces `π̂` by the candidate maximizing the `k`-term lower
/// bound among mixtures of `π̂` toward every deterministic policy at the given
/// weights; stops when no candidate has a positive bound. Requires at most
/// `n_actions^n_states ≤ 4096` deterministic policies.
pub fn monotone_improvement(
    mdp: &TabularMdp,
    start: &TabularPolicy,
    k: usize,
    weights: &[f64],
    max_steps: usize,
) -> Result<Vec<ImprovementStep>> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let n_det = (na as u64)
        .checked_pow(n as u32)
        .filter(|&c| c <= 4096)
        .ok_or_else(|| Error::Config(format!("{na}^{n} deterministic policies is too many to enumerate")))?;
    let deterministic = (0..n_det)
        .map(|code| {
            let actions: Vec<usize> = (0..n)
                .map(|s| ((code / (na as u64).pow(s as u32)) % na as u64) as usize)
                .collect();
            TabularPolicy::deterministic(na, &actions)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut current = start.clone();
    let mut steps = Vec::new();
    for _ in 0..max_steps {
        let mut best: Option<(f64, TabularPolicy)> = None;
        for target in &deterministic {
            for &t in weights {
                // keep every candidate strictly positive so it can serve as the next reference
                let t = t.min(1.0 - 1e-6);
                let cand = current.mix(target, t)?;
                let report = surrogate_report_from_chain(&PairChain::new(mdp, &cand, &current)?, k)?;
                let bound = report.lower_bound();
                if bound > 0.0 && best.as_ref().is_none_or(|(b, _)| bound > *b) {
                    best = Some((bound, cand));
                }
            }
        }
        let Some((bound, next)) = best else { break };
        steps.push(ImprovementStep {
            eta_before: crate::mdp::eta(mdp, &current)?,
            eta_after: crate::mdp::eta(mdp, &next)?,
            bound,
        });
        current = next;
    }
    Ok(steps)
}

pub fn write_rows_csv<W: Write>(rows: &[CheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<CheckRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
