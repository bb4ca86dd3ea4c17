//! End-to-end training: determinism, the zero-weight reduction, learning on
//! both environments, and metrics persistence.

use std::path::PathBuf;

use rpo_lab::env::GridSpec;
use rpo_lab::mdp::{eta, TabularMdp};
use rpo_lab::objective::{ClipConfig, Variant};
use rpo_lab::trainer::{read_metrics_csv, train, write_metrics_csv, EnvSpec, TrainConfig, UpdateRecord};
use rpo_lab::Error;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/m2.toml")
}

fn config(variant: Variant, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        clip: ClipConfig {
            variant,
            ..ClipConfig::default()
        },
        total_timesteps: steps,
        seed,
        ..TrainConfig::default()
    }
}

fn csv_bytes(records: &[UpdateRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_metrics_csv(records, &mut out).unwrap();
    out
}

#[test]
fn identical_configs_give_identical_runs() {
    for variant in Variant::ALL {
        let cfg = config(variant, 4096, 5);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(
            csv_bytes(&a.metrics.records),
            csv_bytes(&b.metrics.records),
            "{variant:?}"
        );
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.value, b.value);
        assert_eq!(a.metrics.manifest, b.metrics.manifest);
    }
    let a = train(&config(Variant::Rpo, 2048, 1)).unwrap();
    let b = train(&config(Variant::Rpo, 2048, 2)).unwrap();
    assert_ne!(a.policy, b.policy);
}

#[test]
fn zero_weight_matches_the_single_ratio_run() {
    let mut rpo = config(Variant::Rpo, 8192, 3);
    rpo.clip.beta = 0.0;
    let ppo = config(Variant::Ppo, 8192, 3);
    let a = train(&rpo).unwrap();
    let b = train(&ppo).unwrap();
    assert_eq!(csv_bytes(&a.metrics.records), csv_bytes(&b.metrics.records));
    assert_eq!(a.policy.params(), b.policy.params());
}

#[test]
fn single_ratio_training_finds_the_short_path() {
    let out = train(&config(Variant::Ppo, 100_000, 0)).unwrap();
    let m = &out.metrics;
    assert_eq!(m.records.len(), 100_000 / 256);
    let early = m.records[..20]
        .iter()
        .filter(|r| r.mean_return.is_finite())
        .map(|r| r.mean_return);
    let early: Vec<f64> = early.collect();
    let early_mean = early.iter().sum::<f64>() / early.len() as f64;
    let late = m.final_window_mean(0.2, |r| r.mean_return);
    assert!(late > early_mean, "late {late} early {early_mean}");
    assert!(late > -20.0, "final return {late}");
    assert!(m.final_window_mean(0.2, |r| r.mean_ep_len) < 20.0);
    for w in m.records.windows(2) {
        assert!(w[1].cliff_falls_cum >= w[0].cliff_falls_cum);
        assert_eq!(w[1].timesteps, w[0].timesteps + 256);
    }
}

#[test]
fn training_on_a_tabular_mdp_improves_its_value() {
    let mdp = TabularMdp::load(fixture_path()).unwrap();
    let cfg = TrainConfig {
        env: EnvSpec::Mdp {
            path: fixture_path(),
            max_episode_steps: 100,
        },
        gamma: mdp.gamma(),
        ..config(Variant::Rpo, 20_480, 4)
    };
    let out = train(&cfg).unwrap();
    let before = {
        let mut short = cfg.clone();
        short.total_timesteps = cfg.batch_size;
        short.learning_rate = 1e-12;
        eta(&mdp, &train(&short).unwrap().policy.to_tabular().unwrap()).unwrap()
    };
    let after = eta(&mdp, &out.policy.to_tabular().unwrap()).unwrap();
    let (best, _) = rpo_lab::mdp::policy_iteration(&mdp).unwrap();
    let optimum = eta(&mdp, &best).unwrap();
    assert!(after > before, "η before {before}, after {after}");
    assert!(
        optimum - after < 0.5 * (optimum - before),
        "η {after}, optimum {optimum}"
    );
}

#[test]
fn final_evaluation_runs_when_requested() {
    let mut cfg = config(Variant::Rpo, 1024, 6);
    assert!(train(&cfg).unwrap().evaluation.is_none());
    cfg.eval_episodes = 5;
    let eval = train(&cfg).unwrap().evaluation.unwrap();
    assert!(eval.mean_length >= 1.0 && eval.mean_length <= 200.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(Variant::Rpo, 100, 0);
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    cfg.total_timesteps = 1024;
    cfg.minibatches_per_epoch = 3;
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    let mut cfg = config(Variant::Rpo, 1024, 0);
    cfg.clip.epsilon1 = 1.5;
    assert!(matches!(train(&cfg), Err(Error::InvalidParameter { .. })));
    let mut cfg = config(Variant::Rpo, 1024, 0);
    cfg.env = EnvSpec::CliffWalking {
        grid: GridSpec {
            max_episode_steps: 0,
            ..GridSpec::default()
        },
    };
    assert!(train(&cfg).is_err());
}

#[test]
fn metrics_round_trip_and_digest() {
    let out = train(&config(Variant::Rpo3, 2048, 9)).unwrap();
    let bytes = csv_bytes(&out.metrics.records);
    let back = read_metrics_csv(&bytes[..]).unwrap();
    assert_eq!(csv_bytes(&back), bytes);
    let header = String::from_utf8(bytes.clone()).unwrap();
    assert!(header.starts_with(
        "update,timesteps,mean_return,mean_ep_len,cliff_falls_cum,loss_clip0,loss_clip1,clipfrac0,clipfrac1,value_loss"
    ));
    let renamed = header.replacen("value_loss", "vloss", 1);
    assert!(read_metrics_csv(renamed.as_bytes()).is_err());

    let cfg = config(Variant::Rpo3, 2048, 9);
    assert_eq!(out.metrics.manifest.config_digest, cfg.digest());
    assert_eq!(cfg.digest().len(), 64);
    assert_ne!(cfg.digest(), config(Variant::Rpo3, 2048, 10).digest());
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
}
