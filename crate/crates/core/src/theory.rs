//! Exact surrogate objectives and lower bounds for a pair of tabular policies.
//!
//! Notation: `π̂` is the reference (current) policy, `π` the candidate. All
//! nested expectations over chained visitation distributions
//! `ρ^π̂(·) → ρ^π̂(·|s₀,a₀) → … → ρ^π(·|s_{k-1},a_{k-1})` are evaluated as
//! products of a row weight vector with the stacked conditional matrices,
//! which is the same finite sum as enumerating every `(s,a)` chain.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{eta, solve_values, visitations, TabularMdp, TabularPolicy};

/// Largest supported number of surrogate terms.
pub const MAX_HORIZON: usize = 4;

/// `α_i = γ^i / (1-γ)^{i+1}`.
pub fn alpha(gamma: f64, i: usize) -> f64 {
    gamma.powi(i as i32) / (1.0 - gamma).powi(i as i32 + 1)
}

/// `β_k = γ^k / (1-γ)^{k+1}`, the same closed form as `α_k`.
pub fn beta(gamma: f64, k: usize) -> f64 {
    alpha(gamma, k)
}

/// `max_s Σ_a |π(a|s) - π̂(a|s)|`.
pub fn tv_distance(pi: &TabularPolicy, pi_hat: &TabularPolicy) -> Result<f64> {
    check_same_shape(pi, pi_hat)?;
    Ok((0..pi.n_states())
        .map(|s| {
            pi.row(s)
                .iter()
                .zip(pi_hat.row(s))
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

fn check_same_shape(pi: &TabularPolicy, pi_hat: &TabularPolicy) -> Result<()> {
    if pi.n_states() != pi_hat.n_states() {
        return Err(Error::Dimension {
            axis: "policy states",
            expected: pi_hat.n_states(),
            got: pi.n_states(),
        });
    }
    if pi.n_actions() != pi_hat.n_actions() {
        return Err(Error::Dimension {
            axis: "policy actions",
            expected: pi_hat.n_actions(),
            got: pi.n_actions(),
        });
    }
    Ok(())
}

fn check_horizon(k: usize, min: usize, max: usize) -> Result<()> {
    if (min..=max).contains(&k) {
        Ok(())
    } else {
        Err(Error::HorizonOutOfRange { k, min, max })
    }
}

/// Penalty `Ĉ_k` of the generalized lower bound.
pub fn penalty(gamma: f64, k: usize, eps: f64, r_max: f64) -> f64 {
    let sum_alpha: f64 = (1..k).map(|i| alpha(gamma, i)).sum();
    gamma * r_max * eps / (1.0 - gamma) * sum_alpha
        + gamma.powi(k as i32) * r_max / (1.0 - gamma).powi(k as i32 + 2) * eps * eps
}

/// Exact ingredients shared by every check on one `(π, π̂)` pair.
///
/// Vectors are indexed by flat state-action pair `s * n_actions + a`.
#[derive(Debug, Clone)]
pub struct PairChain {
    gamma: f64,
    r_max: f64,
    eps: f64,
    /// `ρ^π̂(s, a)`.
    start: DVector<f64>,
    /// Stacked `ρ^π̂(·,·|s,a)`.
    cond_hat: DMatrix<f64>,
    /// Stacked `ρ^π(·,·|s,a)`.
    cond_pi: DMatrix<f64>,
    /// `π(a|s) / π̂(a|s)`.
    ratio: DVector<f64>,
    /// `A^π̂(s, a)`.
    adv_hat: DVector<f64>,
    eta_pi: f64,
    eta_hat: f64,
    /// `ρ^π(s, a)`, only used by the replacement identity check.
    visit_pi: DVector<f64>,
    /// `ρ^π̂(s) π(a|s)`.
    hat_state_pi_action: DVector<f64>,
}

impl PairChain {
    pub fn new(mdp: &TabularMdp, pi: &TabularPolicy, pi_hat: &TabularPolicy) -> Result<Self> {
        check_same_shape(pi, pi_hat)?;
        let na = mdp.n_actions();
        for s in 0..pi_hat.n_states() {
            for a in 0..na {
                if pi_hat.prob(s, a) <= 0.0 {
                    return Err(Error::ZeroProbability { state: s, action: a });
                }
            }
        }
        let visit_hat = visitations(mdp, pi_hat)?;
        let visit_pi = visitations(mdp, pi)?;
        let values_hat = solve_values(mdp, pi_hat)?;
        let n = mdp.n_pairs();
        let ratio = DVector::from_fn(n, |i, _| pi.probs()[i] / pi_hat.probs()[i]);
        let hat_state_pi_action = DVector::from_fn(n, |i, _| visit_hat.state_dist[i / na] * pi.probs()[i]);
        Ok(Self {
            gamma: mdp.gamma(),
            r_max: mdp.r_max(),
            eps: tv_distance(pi, pi_hat)?,
            start: DVector::from_column_slice(&visit_hat.state_action_dist),
            cond_hat: visit_hat.conditional_matrix(),
            cond_pi: visit_pi.conditional_matrix(),
            ratio,
            adv_hat: DVector::from_column_slice(&values_hat.adv),
            eta_pi: eta(mdp, pi)?,
            eta_hat: eta(mdp, pi_hat)?,
            visit_pi: DVector::from_column_slice(&visit_pi.state_action_dist),
            hat_state_pi_action,
        })
    }

    pub fn eta_gap(&self) -> f64 {
        self.eta_pi - self.eta_hat
    }

    pub fn tv_eps(&self) -> f64 {
        self.eps
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn ratio_minus_one(&self) -> DVector<f64> {
        self.ratio.add_scalar(-1.0)
    }

    /// Advance a row weight one link along `ρ^π̂(·|s,a)` after reweighting each
    /// anchor by `weight`.
    fn step_hat(&self, w: &DVector<f64>, weight: &DVector<f64>) -> DVector<f64> {
        self.cond_hat.tr_mul(&w.component_mul(weight))
    }

    fn r_times_adv(&self) -> DVector<f64> {
        self.ratio.component_mul(&self.adv_hat)
    }

    /// `L_i`: `i` links weighted by `(r_t - 1)`, closed by `l_i`.
    pub fn l(&self, i: usize) -> f64 {
        let d = self.ratio_minus_one();
        let mut w = self.start.clone();
        for _ in 0..i {
            w = self.step_hat(&w, &d);
        }
        w.dot(&self.r_times_adv())
    }

    /// `Ĺ_i`: `i+1` ratios multiplied along the chain, closed by `A^π̂(s_i,a_i)`.
    pub fn l_hat(&self, i: usize) -> f64 {
        let mut w = self.start.clone();
        for _ in 0..i {
            w = self.step_hat(&w, &self.ratio);
        }
        w.dot(&self.r_times_adv())
    }

    /// `G_k`: `k` factors `(r_t - 1)`, last link under `ρ^π`.
    pub fn g(&self, k: usize) -> f64 {
        let d = self.ratio_minus_one();
        let mut w = self.start.clone();
        for _ in 0..k - 1 {
            w = self.step_hat(&w, &d);
        }
        self.cond_pi.tr_mul(&w.component_mul(&d)).dot(&self.adv_hat)
    }

    /// `Ĥ_i` for `i ≥ 1`: ratios `r_0..r_{i-2}`, unweighted anchor `i-1`,
    /// last link under `ρ^π`.
    pub fn h_hat(&self, i: usize) -> f64 {
        let mut w = self.start.clone();
        for _ in 0..i - 1 {
            w = self.step_hat(&w, &self.ratio);
        }
        self.cond_pi.tr_mul(&w).dot(&self.adv_hat)
    }

    /// `Ĝ_k`: ratios `r_0..r_{k-2}`, then `(r_{k-1} - 1)`, last link under `ρ^π`.
    pub fn g_hat(&self, k: usize) -> f64 {
        let mut w = self.start.clone();
        for _ in 0..k - 1 {
            w = self.step_hat(&w, &self.ratio);
        }
        self.cond_pi
            .tr_mul(&w.component_mul(&self.ratio_minus_one()))
            .dot(&self.adv_hat)
    }

    /// Both sides of the one-step replacement identity relating `ρ^π` and `ρ^π̂`.
    pub fn replacement_identity(&self) -> (f64, f64) {
        let lhs = self.visit_pi.dot(&self.adv_hat) - self.hat_state_pi_action.dot(&self.adv_hat);
        let inner = self.cond_pi.tr_mul(&self.start.component_mul(&self.ratio_minus_one()));
        let rhs = self.gamma / (1.0 - self.gamma) * inner.dot(&self.adv_hat);
        (lhs, rhs)
    }
}

/// Every surrogate and bound quantity for one `(π, π̂, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateReport {
    pub k: usize,
    pub gamma: f64,
    /// `L_i` for `i < k`.
    pub l: Vec<f64>,
    /// `Ĺ_i` for `i < k`.
    pub l_hat: Vec<f64>,
    pub g_k: f64,
    /// `Ĥ_i` for `i = 1..k-1` (index 0 holds `Ĥ_1`).
    pub h_hat: Vec<f64>,
    pub g_hat: f64,
    /// `α_i` for `i < k`.
    pub alpha: Vec<f64>,
    pub beta_k: f64,
    pub c_hat_k: f64,
    pub tv_eps: f64,
    pub r_max: f64,
    pub eta_gap: f64,
}

impl SurrogateReport {
    /// `Σ_{i<k} α_i L_i + β_k G_k`.
    pub fn generalized_surrogate_total(&self) -> f64 {
        dot(&self.alpha, &self.l) + self.beta_k * self.g_k
    }

    /// `Σ_{i<k} α_i Ĺ_i`.
    pub fn reflective_surrogate(&self) -> f64 {
        dot(&self.alpha, &self.l_hat)
    }

    /// `Σ_{i<k} α_i Ĺ_i - Ĉ_k`.
    pub fn lower_bound(&self) -> f64 {
        self.reflective_surrogate() - self.c_hat_k
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn surrogate_report_from_chain(chain: &PairChain, k: usize) -> Result<SurrogateReport> {
    check_horizon(k, 1, MAX_HORIZON)?;
    let gamma = chain.gamma;
    Ok(SurrogateReport {
        k,
        gamma,
        l: (0..k).map(|i| chain.l(i)).collect(),
        l_hat: (0..k).map(|i| chain.l_hat(i)).collect(),
        g_k: chain.g(k),
        h_hat: (1..k).map(|i| chain.h_hat(i)).collect(),
        g_hat: chain.g_hat(k),
        alpha: (0..k).map(|i| alpha(gamma, i)).collect(),
        beta_k: beta(gamma, k),
        c_hat_k: penalty(gamma, k, chain.eps, chain.r_max),
        tv_eps: chain.eps,
        r_max: chain.r_max,
        eta_gap: chain.eta_gap(),
    })
}

pub fn surrogate_report(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_hat: &TabularPolicy,
    k: usize,
) -> Result<SurrogateReport> {
    check_horizon(k, 1, MAX_HORIZON)?;
    surrogate_report_from_chain(&PairChain::new(mdp, pi, pi_hat)?, k)
}

/// `(E_{ρ^π}A^π̂ - E_{s∼ρ^π̂,a∼π}A^π̂, γ/(1-γ) E_{ρ^π̂}[(r-1) E_{ρ^π(·|s,a)}A^π̂])`.
pub fn replacement_identity_gap(mdp: &TabularMdp, pi: &TabularPolicy, pi_hat: &TabularPolicy) -> Result<(f64, f64)> {
    Ok(PairChain::new(mdp, pi, pi_hat)?.replacement_identity())
}

/// `(η(π) - η(π̂), Σ α_i L_i + β_k G_k)`.
pub fn generalized_identity(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_hat: &TabularPolicy,
    k: usize,
) -> Result<(f64, f64)> {
    let report = surrogate_report(mdp, pi, pi_hat, k)?;
    Ok((report.eta_gap, report.generalized_surrogate_total()))
}

/// `(|β_k G_k|, γ^k ε^{k+1} R_max / (1-γ)^{k+2})`.
pub fn residual_bound(report: &SurrogateReport, gamma: f64) -> (f64, f64) {
    let k = report.k as i32;
    let lhs = (report.beta_k * report.g_k).abs();
    let bound = gamma.powi(k) / (1.0 - gamma).powi(k + 2) * report.tv_eps.powi(k + 1) * report.r_max;
    (lhs, bound)
}

/// `(η(π) - η(π̂), Σ α_i Ĺ_i - Ĉ_k)`.
pub fn penalized_lower_bound(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_hat: &TabularPolicy,
    k: usize,
) -> Result<(f64, f64)> {
    let report = surrogate_report(mdp, pi, pi_hat, k)?;
    Ok((report.eta_gap, report.lower_bound()))
}

/// Exact decomposition behind the generalized lower bound, with the two
/// per-term bounds its proof relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub h_hat: Vec<f64>,
    /// `R_max ε / (1-γ)`.
    pub h_bound: f64,
    pub g_hat: f64,
    /// `R_max ε² / (1-γ)`.
    pub g_bound: f64,
}

impl DecompositionCheck {
    pub fn bounds_hold(&self, slack: f64) -> bool {
        self.h_hat.iter().all(|h| *h <= self.h_bound + slack) && self.g_hat <= self.g_bound + slack
    }
}

pub fn decomposition_from_report(report: &SurrogateReport, gamma: f64) -> DecompositionCheck {
    let h_term: f64 = (1..report.k).map(|i| report.alpha[i] * report.h_hat[i - 1]).sum();
    DecompositionCheck {
        lhs: report.eta_gap,
        rhs: report.reflective_surrogate() - h_term + report.beta_k * report.g_hat,
        h_hat: report.h_hat.clone(),
        h_bound: report.r_max * report.tv_eps / (1.0 - gamma),
        g_hat: report.g_hat,
        g_bound: report.r_max * report.tv_eps * report.tv_eps / (1.0 - gamma),
    }
}

/// `η(π) - η(π̂) = Σα_iĹ_i - Σα_iĤ_i + β_kĜ_k` for `k ∈ {2, 3}`.
pub fn lower_bound_decomposition(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_hat: &TabularPolicy,
    k: usize,
) -> Result<DecompositionCheck> {
    check_horizon(k, 2, 3)?;
    let report = surrogate_report(mdp, pi, pi_hat, k)?;
    Ok(decomposition_from_report(&report, mdp.gamma()))
}

/// Largest policy distance admitted by the solution sets.
pub const PSI_RADIUS: f64 = 0.5;

/// Membership of `μ` in the `k = 1` and `k = 2` solution sets around `π̂`.
/// Round-off allowance on the nonnegativity test; `μ = π̂` sits exactly on the boundary.
pub const PSI_TOL: f64 = 1e-12;

pub fn psi_membership(mdp: &TabularMdp, mu: &TabularPolicy, pi_hat: &TabularPolicy) -> Result<(bool, bool)> {
    let chain = PairChain::new(mdp, mu, pi_hat)?;
    Ok(psi_membership_from_chain(&chain))
}

pub fn psi_membership_from_chain(chain: &PairChain) -> (bool, bool) {
    if chain.eps > PSI_RADIUS {
        return (false, false);
    }
    let g = chain.gamma;
    let l0 = chain.l_hat(0);
    let l1 = chain.l_hat(1);
    let in1 = alpha(g, 0) * l0 - penalty(g, 1, chain.eps, chain.r_max) >= -PSI_TOL;
    let in2 = alpha(g, 0) * l0 + alpha(g, 1) * l1 - penalty(g, 2, chain.eps, chain.r_max) >= -PSI_TOL;
    (in1, in2)
}

/// Closed-form bound on `|β_k G_k|` and the TayPO remainder
/// bound at the same `(γ, ε, k, R_max)`.
pub fn taypo_bounds(gamma: f64, eps: f64, k: usize, r_max: f64) -> Result<(f64, f64)> {
    let margin = 1.0 - gamma - gamma * eps;
    if margin <= 0.0 {
        return Err(Error::TaypoRegime { margin });
    }
    let k = k as i32;
    let rpo = gamma.powi(k) / (1.0 - gamma).powi(k + 2) * eps.powi(k + 1) * r_max;
    let x = gamma * eps / (1.0 - gamma);
    let taypo = 1.0 / (gamma * (1.0 - gamma)) / (1.0 - x) * x.powi(k + 1) * r_max;
    Ok((rpo, taypo))
}

pub fn taypo_bound_compare(report: &SurrogateReport, gamma: f64, k: usize) -> Result<(f64, f64)> {
    taypo_bounds(gamma, report.tv_eps, k, report.r_max)
}
