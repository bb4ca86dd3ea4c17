//! Policy and value networks: gradients against central differences,
//! checkpoint round-trips and the optimizer step.

use proptest::prelude::*;
use rpo_lab::policy::{
    adam_step, Activation, AdamState, Architecture, GradientBuffer, Mlp, PolicyNetwork, StochasticPolicy, ValueNetwork,
};
use rpo_lab::Error;

const H: f64 = 1e-6;

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let up = f(&p);
            p[i] = orig - H;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "param {i}: {a} vs {n}");
    }
}

fn network(activation: Activation, seed: u64) -> PolicyNetwork {
    let arch = Architecture {
        activation,
        ..Architecture::new(5, vec![8, 6], 3)
    };
    // full-scale output layer so the softmax is far from uniform
    PolicyNetwork::from_mlp(Mlp::init(arch, seed, 1.0), seed)
}

fn with_params(net: &PolicyNetwork, params: &[f64]) -> PolicyNetwork {
    PolicyNetwork::from_mlp(Mlp::from_parts(net.architecture().clone(), params.to_vec()).unwrap(), 0)
}

#[test]
fn log_prob_gradient_matches_central_difference() {
    for activation in [Activation::Tanh, Activation::Relu] {
        let net = network(activation, 3);
        for (s, a) in [(0, 0), (2, 1), (4, 2)] {
            let (lp, grad) = net.log_prob_and_grad(s, a).unwrap();
            assert!((lp - net.log_prob(s, a).unwrap()).abs() < 1e-15);
            let numeric = central_difference(net.params(), |p| with_params(&net, p).log_prob(s, a).unwrap());
            assert_grad_close(&grad.grad, &numeric);
        }
    }
}

#[test]
fn weighted_log_prob_gradient_is_linear_in_weights() {
    let net = network(Activation::Tanh, 5);
    let coeff = [0.3, -1.2, 2.0];
    let mut acc = GradientBuffer::zeros(net.params().len());
    let probs = net.accumulate_log_prob_grads(1, &coeff, &mut acc).unwrap();
    assert_eq!(probs, net.forward(1).unwrap());
    let mut expected = GradientBuffer::zeros(net.params().len());
    for (a, c) in coeff.iter().enumerate() {
        let (_, g) = net.log_prob_and_grad(1, a).unwrap();
        expected.add_scaled(&g, *c);
    }
    for (x, y) in acc.grad.iter().zip(&expected.grad) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn value_gradient_matches_central_difference() {
    let value = ValueNetwork::new(4, vec![6], 9);
    let mut grad = GradientBuffer::zeros(value.params().len());
    let v = value.accumulate_value_grad(2, 1.0, &mut grad).unwrap();
    assert_eq!(v, value.value(2).unwrap());
    let numeric = central_difference(value.params(), |p| {
        let mut other = value.clone();
        other.params_mut().copy_from_slice(p);
        other.value(2).unwrap()
    });
    assert_grad_close(&grad.grad, &numeric);
}

#[test]
fn fresh_policy_is_near_uniform() {
    let net = PolicyNetwork::new(48, vec![64], 4, 0);
    assert_eq!(net.params().len(), 48 * 64 + 64 + 64 * 4 + 4);
    for s in 0..48 {
        let probs = net.action_probs(s).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 0.02));
    }
    let tab = net.to_tabular().unwrap();
    assert_eq!(tab.row(7), &net.forward(7).unwrap()[..]);
    assert!(matches!(net.log_prob(0, 4), Err(Error::InvalidAction { .. })));
}

#[test]
fn initialization_is_seed_deterministic() {
    assert_eq!(
        PolicyNetwork::new(6, vec![5], 2, 11),
        PolicyNetwork::new(6, vec![5], 2, 11)
    );
    assert_ne!(
        PolicyNetwork::new(6, vec![5], 2, 11).params(),
        PolicyNetwork::new(6, vec![5], 2, 12).params()
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let net = network(Activation::Relu, 1);
    let mut bytes = Vec::new();
    net.write_checkpoint(&mut bytes).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        PolicyNetwork::read_checkpoint(&bad_magic[..]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(
        PolicyNetwork::read_checkpoint(&bad_version[..]),
        Err(Error::Checkpoint(_))
    ));
    assert!(PolicyNetwork::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn first_adam_step_moves_by_learning_rate_uphill() {
    let mut params = vec![1.0, -2.0, 0.5];
    let grad = GradientBuffer {
        grad: vec![4.0, -0.001, 0.0],
    };
    let mut state = AdamState::new(3);
    adam_step(&mut params, &grad, 0.1, &mut state).unwrap();
    assert!((params[0] - 1.1).abs() < 1e-6);
    assert!((params[1] + 2.1).abs() < 1e-4);
    assert_eq!(params[2], 0.5);
    let bad = GradientBuffer {
        grad: vec![f64::NAN, 0.0, 0.0],
    };
    assert!(matches!(
        adam_step(&mut params, &bad, 0.1, &mut state),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn adam_ascends_a_concave_quadratic() {
    let mut x = vec![0.0, 10.0];
    let target = [3.0, -1.0];
    let mut state = AdamState::new(2);
    for _ in 0..3000 {
        let grad = GradientBuffer {
            grad: x.iter().zip(&target).map(|(x, t)| -2.0 * (x - t)).collect(),
        };
        adam_step(&mut x, &grad, 0.05, &mut state).unwrap();
    }
    assert!((x[0] - 3.0).abs() < 1e-3 && (x[1] + 1.0).abs() < 1e-3, "{x:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_round_trip(
        n_inputs in 1usize..8,
        hidden in proptest::collection::vec(1usize..6, 0..3),
        n_outputs in 1usize..5,
        relu in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let arch = Architecture {
            activation: if relu { Activation::Relu } else { Activation::Tanh },
            ..Architecture::new(n_inputs, hidden, n_outputs)
        };
        let net = PolicyNetwork::from_mlp(Mlp::init(arch, seed, 1.0), seed);
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes).unwrap();
        let back = PolicyNetwork::read_checkpoint(&bytes[..]).unwrap();
        prop_assert_eq!(back.architecture(), net.architecture());
        let same_bits = back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        for s in 0..n_inputs {
            prop_assert_eq!(back.forward(s).unwrap(), net.forward(s).unwrap());
        }
    }
}
