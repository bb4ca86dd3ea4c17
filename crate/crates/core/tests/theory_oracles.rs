//! Chained surrogate quantities against explicit enumeration over every
//! state-action chain, with conditional visitations from truncated series.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpo_lab::env::{random_mdp, random_policy};
use rpo_lab::mdp::{TabularMdp, TabularPolicy};
use rpo_lab::theory::{
    alpha, beta, generalized_identity, lower_bound_decomposition, penalized_lower_bound, penalty, psi_membership,
    surrogate_report, taypo_bounds, tv_distance, PairChain,
};
use rpo_lab::verify::{monotone_improvement, psi_sweep};
use rpo_lab::Error;

fn m2() -> TabularMdp {
    TabularMdp::from_toml_str(include_str!("../fixtures/m2.toml")).unwrap()
}

/// Explicit tables for one policy: state visitation from the initial
/// distribution and the `(s,a) → (s',a')` conditional visitation, both summed
/// term by term until `γ^t < 1e-16`.
struct Tables {
    pairs: usize,
    start: Vec<f64>,
    cond: Vec<Vec<f64>>,
}

fn propagate(mdp: &TabularMdp, pi: &TabularPolicy, from: &[f64]) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.gamma();
    let mut d = from.to_vec();
    let mut acc = vec![0.0; n * na];
    let mut w = 1.0 - g;
    while w > 1e-16 {
        for s in 0..n {
            for a in 0..na {
                acc[s * na + a] += w * d[s] * pi.prob(s, a);
            }
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                for (t, x) in next.iter_mut().enumerate() {
                    *x += d[s] * pi.prob(s, a) * mdp.prob(s, a, t);
                }
            }
        }
        d = next;
        w *= g;
    }
    acc
}

fn tables(mdp: &TabularMdp, pi: &TabularPolicy) -> Tables {
    let na = mdp.n_actions();
    let pairs = mdp.n_states() * na;
    Tables {
        pairs,
        start: propagate(mdp, pi, mdp.initial_dist()),
        cond: (0..pairs)
            .map(|x| propagate(mdp, pi, mdp.next_dist(x / na, x % na)))
            .collect(),
    }
}

/// `A^π̂` from iterative policy evaluation.
fn advantages(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; n];
    let q = |v: &[f64]| -> Vec<f64> {
        (0..n * na)
            .map(|x| {
                let (s, a) = (x / na, x % na);
                mdp.reward(s, a) + mdp.gamma() * (0..n).map(|t| mdp.prob(s, a, t) * v[t]).sum::<f64>()
            })
            .collect()
    };
    for _ in 0..5000 {
        let qs = q(&v);
        v = (0..n)
            .map(|s| (0..na).map(|a| pi.prob(s, a) * qs[s * na + a]).sum())
            .collect();
    }
    let qs = q(&v);
    (0..n * na).map(|x| qs[x] - v[x / na]).collect()
}

fn eta_oracle(mdp: &TabularMdp, pi: &TabularPolicy) -> f64 {
    let t = tables(mdp, pi);
    t.start.iter().zip(mdp.rewards()).map(|(d, r)| d * r).sum::<f64>() / (1.0 - mdp.gamma())
}

struct Oracle {
    hat: Tables,
    pi: Tables,
    ratio: Vec<f64>,
    adv: Vec<f64>,
}

impl Oracle {
    fn new(mdp: &TabularMdp, pi: &TabularPolicy, pi_hat: &TabularPolicy) -> Self {
        Self {
            hat: tables(mdp, pi_hat),
            pi: tables(mdp, pi),
            ratio: pi.probs().iter().zip(pi_hat.probs()).map(|(a, b)| a / b).collect(),
            adv: advantages(mdp, pi_hat),
        }
    }

    /// Σ over chains `x_0 … x_m` of `ρ^π̂(x_0) Π_t factor_t(x_t) ρ(x_{t+1}|x_t) · close(x_m)`,
    /// with the last link under `ρ^π` when `last_pi`.
    fn nested(&self, factors: &[Vec<f64>], close: &[f64], last_pi: bool) -> f64 {
        fn rec(o: &Oracle, x: usize, depth: usize, f: &[Vec<f64>], close: &[f64], last_pi: bool) -> f64 {
            if depth == f.len() {
                return close[x];
            }
            let link = if last_pi && depth + 1 == f.len() {
                &o.pi.cond[x]
            } else {
                &o.hat.cond[x]
            };
            let inner: f64 = (0..o.hat.pairs)
                .map(|y| link[y] * rec(o, y, depth + 1, f, close, last_pi))
                .sum();
            f[depth][x] * inner
        }
        (0..self.hat.pairs)
            .map(|x| self.hat.start[x] * rec(self, x, 0, factors, close, last_pi))
            .sum()
    }

    fn r_minus_one(&self) -> Vec<f64> {
        self.ratio.iter().map(|r| r - 1.0).collect()
    }

    fn r_adv(&self) -> Vec<f64> {
        self.ratio.iter().zip(&self.adv).map(|(r, a)| r * a).collect()
    }

    fn l(&self, i: usize) -> f64 {
        self.nested(&vec![self.r_minus_one(); i], &self.r_adv(), false)
    }

    fn l_hat(&self, i: usize) -> f64 {
        self.nested(&vec![self.ratio.clone(); i], &self.r_adv(), false)
    }

    fn g(&self, k: usize) -> f64 {
        self.nested(&vec![self.r_minus_one(); k], &self.adv, true)
    }

    fn h_hat(&self, i: usize) -> f64 {
        let mut f = vec![self.ratio.clone(); i - 1];
        f.push(vec![1.0; self.hat.pairs]);
        self.nested(&f, &self.adv, true)
    }

    fn g_hat(&self, k: usize) -> f64 {
        let mut f = vec![self.ratio.clone(); k - 1];
        f.push(self.r_minus_one());
        self.nested(&f, &self.adv, true)
    }
}

fn pair(seed: u64, n: usize, na: usize) -> (TabularPolicy, TabularPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi_hat = random_policy(n, na, &mut rng);
    let pi = random_policy(n, na, &mut rng);
    (pi, pi_hat)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn chain_terms_match_enumeration_on_fixture() {
    let mdp = m2();
    let (pi, pi_hat) = pair(11, 2, 2);
    let chain = PairChain::new(&mdp, &pi, &pi_hat).unwrap();
    let oracle = Oracle::new(&mdp, &pi, &pi_hat);
    for i in 0..4 {
        assert!(close(chain.l(i), oracle.l(i), 1e-10), "L_{i}");
        assert!(close(chain.l_hat(i), oracle.l_hat(i), 1e-10), "Ĺ_{i}");
    }
    for k in 1..=3 {
        assert!(close(chain.g(k), oracle.g(k), 1e-10), "G_{k}");
        assert!(close(chain.g_hat(k), oracle.g_hat(k), 1e-10), "Ĝ_{k}");
        assert!(close(chain.h_hat(k), oracle.h_hat(k), 1e-10), "Ĥ_{k}");
    }
}

#[test]
fn chain_terms_match_enumeration_on_larger_instance() {
    let mdp = random_mdp(8, 3, 2, 0.8).unwrap();
    let (pi, pi_hat) = pair(12, 3, 2);
    let chain = PairChain::new(&mdp, &pi, &pi_hat).unwrap();
    let oracle = Oracle::new(&mdp, &pi, &pi_hat);
    for i in 0..3 {
        assert!(close(chain.l(i), oracle.l(i), 1e-10));
        assert!(close(chain.l_hat(i), oracle.l_hat(i), 1e-10));
    }
    for k in 1..=3 {
        assert!(close(chain.g(k), oracle.g(k), 1e-10));
        assert!(close(chain.g_hat(k), oracle.g_hat(k), 1e-10));
    }
}

#[test]
fn generalized_identity_on_fixture_against_enumeration() {
    let mdp = m2();
    let (pi, pi_hat) = pair(21, 2, 2);
    let oracle = Oracle::new(&mdp, &pi, &pi_hat);
    let gap = eta_oracle(&mdp, &pi) - eta_oracle(&mdp, &pi_hat);
    let g = mdp.gamma();
    for k in 1..=3 {
        let total: f64 = (0..k).map(|i| alpha(g, i) * oracle.l(i)).sum::<f64>() + beta(g, k) * oracle.g(k);
        assert!((total - gap).abs() < 1e-9, "oracle k={k}: {total} vs {gap}");
        let (lhs, rhs) = generalized_identity(&mdp, &pi, &pi_hat, k).unwrap();
        assert!((lhs - gap).abs() < 1e-9);
        assert!((rhs - gap).abs() < 1e-9);
    }
}

#[test]
fn one_step_replacement_identity_against_enumeration() {
    let mdp = m2();
    let (pi, pi_hat) = pair(31, 2, 2);
    let oracle = Oracle::new(&mdp, &pi, &pi_hat);
    let chain = PairChain::new(&mdp, &pi, &pi_hat).unwrap();
    let (lhs, rhs) = chain.replacement_identity();
    let visit_pi = &oracle.pi.start;
    let na = 2;
    let d_hat: Vec<f64> = (0..2)
        .map(|s| oracle.hat.start[s * na] + oracle.hat.start[s * na + 1])
        .collect();
    let expected_lhs: f64 = (0..4)
        .map(|x| (visit_pi[x] - d_hat[x / na] * pi.probs()[x]) * oracle.adv[x])
        .sum();
    let g = mdp.gamma();
    let expected_rhs = g / (1.0 - g) * oracle.g(1);
    assert!((lhs - expected_lhs).abs() < 1e-10);
    assert!((rhs - expected_rhs).abs() < 1e-10);
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn closed_form_coefficients() {
    assert!((alpha(0.9, 0) - 10.0).abs() < 1e-12);
    assert!((alpha(0.9, 1) - 90.0).abs() < 1e-9);
    assert!((alpha(0.5, 2) - 2.0).abs() < 1e-12);
    assert_eq!(beta(0.7, 3), alpha(0.7, 3));
    // k = 1: only the quadratic term, γ R ε² / (1−γ)³
    assert!((penalty(0.5, 1, 0.1, 2.0) - 0.5 * 2.0 * 0.01 / 0.125).abs() < 1e-12);
    // k = 2: γ R ε/(1−γ) · α_1 + γ² R ε² / (1−γ)⁴
    let expected = 0.5 * 0.1 / 0.5 * 2.0 + 0.25 * 0.01 / 0.0625;
    assert!((penalty(0.5, 2, 0.1, 1.0) - expected).abs() < 1e-12);
}

#[test]
fn tv_distance_cases() {
    let a = TabularPolicy::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
    let b = TabularPolicy::from_rows(&[vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
    assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
    assert!((tv_distance(&a, &b).unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(tv_distance(&a, &b).unwrap(), tv_distance(&b, &a).unwrap());
    let left = TabularPolicy::deterministic(2, &[0, 0]).unwrap();
    let right = TabularPolicy::deterministic(2, &[1, 1]).unwrap();
    assert_eq!(tv_distance(&left, &right).unwrap(), 2.0);
    let wide = TabularPolicy::uniform(2, 3);
    assert!(matches!(tv_distance(&a, &wide), Err(Error::Dimension { .. })));
}

#[test]
fn residual_bound_comparison_example() {
    // γ = 0.9, ε = 0.05, k = 2, R_max = 1
    let (rpo, taypo) = taypo_bounds(0.9, 0.05, 2, 1.0).unwrap();
    assert!((rpo - 1.0125).abs() < 1e-12);
    assert!((taypo - 0.091125 / 0.0495).abs() < 1e-12);
    assert!(rpo < taypo);
    assert!(matches!(
        taypo_bounds(0.99, 0.05, 2, 1.0),
        Err(Error::TaypoRegime { .. })
    ));
}

#[test]
fn identical_policies_give_zero_everywhere() {
    let mdp = m2();
    let (_, pi_hat) = pair(41, 2, 2);
    for k in 1..=3 {
        let report = surrogate_report(&mdp, &pi_hat, &pi_hat, k).unwrap();
        assert_eq!(report.tv_eps, 0.0);
        assert_eq!(report.c_hat_k, 0.0);
        assert!(report.eta_gap.abs() < 1e-15);
        assert!(report.l.iter().all(|x| x.abs() < 1e-12));
        assert!(report.g_k.abs() < 1e-12);
        assert!(report.lower_bound().abs() < 1e-12);
    }
    let (in1, in2) = psi_membership(&mdp, &pi_hat, &pi_hat).unwrap();
    assert!(in1 && in2);
}

#[test]
fn single_term_bound_is_the_trust_region_bound() {
    let mdp = m2();
    let (pi, pi_hat) = pair(51, 2, 2);
    let g = mdp.gamma();
    let report = surrogate_report(&mdp, &pi, &pi_hat, 1).unwrap();
    let oracle = Oracle::new(&mdp, &pi, &pi_hat);
    let eps = report.tv_eps;
    let trpo = oracle.l(0) / (1.0 - g) - g * mdp.r_max() * eps * eps / (1.0 - g).powi(3);
    assert!((report.lower_bound() - trpo).abs() < 1e-9);
    let (gap, bound) = penalized_lower_bound(&mdp, &pi, &pi_hat, 1).unwrap();
    assert!(gap >= bound);
}

#[test]
fn horizon_is_range_checked() {
    let mdp = m2();
    let (pi, pi_hat) = pair(61, 2, 2);
    assert!(matches!(
        surrogate_report(&mdp, &pi, &pi_hat, 0),
        Err(Error::HorizonOutOfRange { .. })
    ));
    assert!(matches!(
        surrogate_report(&mdp, &pi, &pi_hat, 5),
        Err(Error::HorizonOutOfRange { .. })
    ));
    assert!(matches!(
        lower_bound_decomposition(&mdp, &pi, &pi_hat, 1),
        Err(Error::HorizonOutOfRange { .. })
    ));
}

#[test]
fn zero_reference_probability_is_rejected() {
    let mdp = m2();
    let det = TabularPolicy::deterministic(2, &[0, 1]).unwrap();
    let uni = TabularPolicy::uniform(2, 2);
    assert!(matches!(
        PairChain::new(&mdp, &uni, &det),
        Err(Error::ZeroProbability { .. })
    ));
}

#[test]
fn solution_set_inclusion_on_fixture() {
    let mdp = m2();
    let (_, pi_hat) = pair(71, 2, 2);
    let counts = psi_sweep(&mdp, &pi_hat, 10_000, 7).unwrap();
    assert_eq!(counts.samples, 10_000);
    assert_eq!(counts.violations, 0);
    assert!(counts.in_psi1 >= counts.in_psi2);
}

#[test]
fn bound_maximization_improves_monotonically() {
    // at γ = 0.9 the two-term penalty is linear in ε with a large constant and
    // admits no improving step on this MDP
    let mdp = m2().with_gamma(0.5).unwrap();
    let start = TabularPolicy::uniform(2, 2);
    let weights = [1e-4, 1e-3, 1e-2, 0.1, 0.3, 1.0];
    for k in [1, 2] {
        let steps = monotone_improvement(&mdp, &start, k, &weights, 50).unwrap();
        assert!(!steps.is_empty(), "k={k} made no progress");
        for s in &steps {
            assert!(s.bound > 0.0);
            assert!(s.eta_after - s.eta_before >= s.bound - 1e-12, "k={k}: {s:?}");
        }
        for w in steps.windows(2) {
            assert!((w[0].eta_after - w[1].eta_before).abs() < 1e-12);
        }
    }
}

fn instance() -> impl Strategy<Value = (TabularMdp, TabularPolicy, TabularPolicy)> {
    (2usize..=5, 2usize..=3, 0.5f64..0.95, any::<u64>(), 0.0f64..=1.0).prop_map(|(n, na, g, seed, t)| {
        let mdp = random_mdp(seed, n, na, g).unwrap();
        let (other, pi_hat) = pair(seed.wrapping_add(1), n, na);
        let pi = pi_hat.mix(&other, t).unwrap();
        (mdp, pi, pi_hat)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_and_decomposition_hold((mdp, pi, pi_hat) in instance()) {
        for k in 1..=3 {
            let (lhs, rhs) = generalized_identity(&mdp, &pi, &pi_hat, k).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));
        }
        for k in 2..=3 {
            let app = lower_bound_decomposition(&mdp, &pi, &pi_hat, k).unwrap();
            prop_assert!((app.lhs - app.rhs).abs() <= 1e-8 * (1.0 + app.lhs.abs()));
            prop_assert!(app.bounds_hold(1e-12));
        }
    }

    #[test]
    fn lower_bound_holds_in_moderate_discounts((mdp, pi, pi_hat) in instance()) {
        for k in 1..=3 {
            let (gap, bound) = penalized_lower_bound(&mdp, &pi, &pi_hat, k).unwrap();
            prop_assert!(gap >= bound - 1e-12, "k={} gap {} bound {}", k, gap, bound);
        }
    }

    #[test]
    fn membership_requires_nonnegative_single_term((mdp, pi, pi_hat) in instance()) {
        let (in1, _) = psi_membership(&mdp, &pi, &pi_hat).unwrap();
        if in1 {
            let (gap, _) = penalized_lower_bound(&mdp, &pi, &pi_hat, 1).unwrap();
            prop_assert!(gap >= -1e-12);
        }
    }
}
