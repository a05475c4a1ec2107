use dlfm_core::experiments::{
    aligned_accuracy, estimate_transition, gen_constrained_kmeans, gen_forgetting_q, gen_io_hmm, gen_mixture_linreg,
    io_hmm_spec, kmeans_spec, max_abs_deviation, switching_label, ExperimentConfig, ExperimentName,
    ForgettingQConfig, IoHmmConfig, KmeansConfig, MixtureLinregConfig,
};
use dlfm_core::{validate, Labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn noiseless_kmeans_points_lie_on_the_sphere() {
    let cfg = KmeansConfig { sigma: 0.0, m: 200, seed: 3, ..KmeansConfig::default() };
    let data = gen_constrained_kmeans(&cfg).unwrap();
    for i in 0..data.m() {
        let norm: f64 = data.feature(i).iter().map(|v| v.abs()).sum();
        assert!((norm - 2.0).abs() <= 1e-12);
    }
    let noisy = gen_constrained_kmeans(&KmeansConfig { seed: 3, ..KmeansConfig::default() }).unwrap();
    let mean: f64 = (0..noisy.m()).map(|i| noisy.feature(i).iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>()
        / noisy.m() as f64;
    assert!((mean - 2.0).abs() <= 0.05, "{mean}");
}

#[test]
fn kmeans_center_polyhedron_is_valid() {
    let cfg = KmeansConfig::default();
    let data = gen_constrained_kmeans(&cfg).unwrap();
    assert!(validate(&kmeans_spec(&cfg, true), &data).is_ok());
    assert!(validate(&kmeans_spec(&cfg, false), &data).is_ok());
}

#[test]
fn noiseless_mixture_fits_exactly() {
    let cfg = MixtureLinregConfig { sigma: 0.0, seed: 9, ..MixtureLinregConfig::default() };
    let syn = gen_mixture_linreg(&cfg).unwrap();
    let labels = syn.labels.unwrap();
    for i in 0..syn.data.m() {
        let theta = &cfg.thetas[labels[i] - 1];
        let pred: f64 = syn.data.feature(i).iter().zip(theta).map(|(a, b)| a * b).sum();
        assert_eq!(pred, syn.data.observation(i)[0]);
        assert!(syn.data.feature(i).iter().all(|v| v.abs() <= 10.0));
    }
}

#[test]
fn mixture_label_frequencies_follow_p() {
    let syn = gen_mixture_linreg(&MixtureLinregConfig { seed: 1, ..MixtureLinregConfig::default() }).unwrap();
    let labels = syn.labels.unwrap();
    for (j, p) in [0.4, 0.3, 0.3].iter().enumerate() {
        let freq = labels.iter().filter(|l| *l == j + 1).count() as f64 / labels.len() as f64;
        assert!((freq - p).abs() <= 0.06, "factor {}: {freq}", j + 1);
    }
}

#[test]
fn forgetting_features_are_reward_histories() {
    let cfg = ForgettingQConfig { seed: 2, ..ForgettingQConfig::default() };
    let syn = gen_forgetting_q(&cfg).unwrap();
    let data = &syn.data;
    assert_eq!((data.m(), data.rows(), data.n(), data.obs_width()), (200, 3, 5, 3));
    assert!(data.is_ordered());
    for t in 0..data.m() {
        let x = data.feature(t);
        assert!(x.iter().all(|v| *v == 0.0 || *v == 1.0));
        for c in 0..5 {
            assert!((0..3).filter(|r| x[r * 5 + c] != 0.0).count() <= 1);
        }
        assert_eq!(data.observation(t).iter().sum::<f64>(), 1.0);
        // lag-1 reward of trial t+1 was earned on the action chosen at t
        if t + 1 < data.m() {
            let next = data.feature(t + 1);
            for r in 0..3 {
                if next[r * 5] == 1.0 {
                    assert_eq!(data.observation(t)[r], 1.0);
                }
            }
        }
    }
    let labels = syn.labels.unwrap();
    for t in 1..=200 {
        assert_eq!(labels[t - 1], switching_label(t, 20, 2));
    }
    assert_eq!(switching_label(21, 20, 2), 2);
    assert_eq!(switching_label(41, 20, 2), 1);
}

#[test]
fn sharp_forgetting_repeats_the_last_rewarded_action() {
    let cfg = ForgettingQConfig {
        thetas: vec![vec![100.0, 0.0, 0.0, 0.0, 0.0]],
        switch_period: 1000,
        seed: 4,
        ..ForgettingQConfig::default()
    };
    let data = gen_forgetting_q(&cfg).unwrap().data;
    let mut checked = 0;
    for t in 0..data.m() {
        let x = data.feature(t);
        if let Some(r) = (0..3).find(|r| x[r * 5] == 1.0) {
            assert_eq!(data.observation(t)[r], 1.0);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn io_hmm_has_bias_feature_and_balanced_responses_at_zero() {
    let cfg = IoHmmConfig { thetas: vec![vec![0.0, 0.0]; 3], m: 2000, seed: 5, ..IoHmmConfig::default() };
    let syn = gen_io_hmm(&cfg).unwrap();
    let data = &syn.data;
    let mut ones = 0.0;
    for t in 0..data.m() {
        let x = data.feature(t);
        assert_eq!(x[1], 1.0);
        assert!((-5.0..5.0).contains(&x[0]));
        ones += data.observation(t)[0];
    }
    assert!((ones / data.m() as f64 - 0.5).abs() <= 0.05);
    assert_eq!(syn.labels.unwrap()[0], 1);
    assert!(validate(&io_hmm_spec(&IoHmmConfig::default()), data).is_ok());
}

#[test]
fn io_hmm_chain_transitions_are_recoverable() {
    let syn = gen_io_hmm(&IoHmmConfig { seed: 6, ..IoHmmConfig::default() }).unwrap();
    let estimated = estimate_transition(&syn.labels.unwrap(), 3).unwrap();
    let truth = IoHmmConfig::default().p_tr;
    assert!(max_abs_deviation(&estimated, &truth) <= 0.08);
}

#[test]
fn transition_counts_example() {
    let p = estimate_transition(&Labels(vec![1, 1, 2, 2, 1]), 2).unwrap();
    assert_eq!(p, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
}

#[test]
fn random_guessing_scores_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = Labels((0..1000).map(|_| rng.random_range(1..=2)).collect());
    let guess = Labels((0..1000).map(|_| rng.random_range(1..=2)).collect());
    let (acc, _) = aligned_accuracy(&guess, &truth, 2).unwrap();
    assert!((0.5..=0.55).contains(&acc), "{acc}");
}

#[test]
fn aligned_accuracy_examples() {
    let truth = Labels(vec![1, 1, 2, 2]);
    assert_eq!(aligned_accuracy(&Labels(vec![2, 2, 1, 1]), &truth, 2).unwrap(), (1.0, vec![2, 1]));
    assert_eq!(aligned_accuracy(&Labels(vec![1, 2, 1, 2]), &truth, 2).unwrap().0, 0.5);
}

#[test]
fn generators_are_deterministic_and_configs_round_trip() {
    for name in ExperimentName::ALL {
        let cfg = name.default_config(11);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let a = dlfm_core::experiments::generate(&cfg).unwrap();
        let b = dlfm_core::experiments::generate(&back).unwrap();
        assert_eq!(a, b);
    }
    assert!("nope".parse::<ExperimentName>().is_err());
}

#[test]
fn bad_configs_are_rejected() {
    let cfg = MixtureLinregConfig { p: vec![0.5, 0.6, -0.1], ..MixtureLinregConfig::default() };
    assert!(gen_mixture_linreg(&cfg).is_err());
    let cfg = IoHmmConfig { p_tr: vec![vec![1.0, 0.0, 0.0]; 2], ..IoHmmConfig::default() };
    assert!(gen_io_hmm(&cfg).is_err());
    let err = serde_json::from_str::<ExperimentConfig>(r#"{"name":"io_hmm","bogus":1}"#);
    assert!(err.is_err());
}
