use proptest::prelude::*;

use rat_core::env::{EnvSpec, LatentParams, LATENT_DIM};
use rat_core::eval::{band, metric_stepwise, sample_adjacent, EpisodeOutcome};
use rat_core::harness::checkpoint::{decode, encode, Provenance};
use rat_core::nn::{GaussianHead, NetworkConfig, LOG_STD_MAX, LOG_STD_MIN};
use rat_core::ppo::gae::normalize;
use rat_core::rat::{correct_action, rat_reward, GapSampler, RatOptions, RatPolicy};
use rat_core::seed::rng_from;
use rat_core::upn::{ThetaRange, UniversalPolicy};

fn small_net() -> NetworkConfig {
    NetworkConfig {
        hidden_width: 8,
        ..NetworkConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn adjacent_samples_stay_in_band(
        theta in prop::array::uniform5(0.0..1.0f64),
        dev in 0.0..1.0f64,
        n in 0usize..30,
        seed in any::<u64>(),
    ) {
        let theta = LatentParams(theta);
        let samples = sample_adjacent(&theta, dev, n, seed).unwrap();
        prop_assert_eq!(samples.len(), n);
        for s in &samples {
            for k in 0..LATENT_DIM {
                let (lo, hi) = band(&theta, dev, k);
                prop_assert!(s.theta_hat.0[k] >= lo && s.theta_hat.0[k] <= hi);
            }
        }
    }

    #[test]
    fn metric_ignores_episode_order(
        eps in prop::collection::vec((-500.0..100.0f64, 1usize..500), 1..60),
        rotate in 0usize..60,
    ) {
        let outcomes: Vec<EpisodeOutcome> =
            eps.iter().map(|&(total_reward, steps)| EpisodeOutcome { total_reward, steps }).collect();
        let mut shuffled = outcomes.clone();
        shuffled.rotate_left(rotate % outcomes.len());
        shuffled.reverse();
        let (m1, s1) = metric_stepwise(&outcomes).unwrap();
        let (m2, s2) = metric_stepwise(&shuffled).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-12 * m1.abs().max(1.0));
        prop_assert!((s1 - s2).abs() <= 1e-10 * s1.abs().max(1.0));
    }

    #[test]
    fn imitation_reward_is_a_negative_squared_distance(
        a in prop::collection::vec(-10.0..10.0f64, 4),
        b in prop::collection::vec(-10.0..10.0f64, 4),
    ) {
        prop_assert_eq!(rat_reward(&a, &a).unwrap(), 0.0);
        let r = rat_reward(&a, &b).unwrap();
        prop_assert!(r <= 0.0);
        prop_assert_eq!(r, rat_reward(&b, &a).unwrap());
    }

    #[test]
    fn corrected_actions_respect_bounds(
        a in prop::collection::vec(-1.0..1.0f64, 1..4),
        d in prop::collection::vec(-5.0..5.0f64, 4),
        bound in 0.1..3.0f64,
    ) {
        let out = correct_action(&a, &d[..a.len()], bound);
        prop_assert_eq!(out.len(), a.len());
        prop_assert!(out.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn gaussian_spread_is_clamped(log_std in prop::collection::vec(-50.0..50.0f64, 1..4)) {
        let head = GaussianHead::new(vec![0.0; log_std.len()], &log_std);
        prop_assert!(head.log_std.iter().all(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)));
    }

    #[test]
    fn normalized_advantages_have_unit_statistics(v in prop::collection::vec(-100.0..100.0f64, 2..200)) {
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let mut v = v;
        normalize(&mut v);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-8);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sampled_gaps_stay_in_sampler_support(seed in any::<u64>()) {
        let sampler = GapSampler::default();
        let gap = sampler.sample(&mut rng_from(seed));
        for k in 0..LATENT_DIM {
            if sampler.low[k] < sampler.high[k] {
                prop_assert!(gap.0[k] >= sampler.low[k] && gap.0[k] < sampler.high[k]);
            } else {
                prop_assert_eq!(gap.0[k], sampler.low[k]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn universal_policy_checkpoint_round_trips(seed in any::<u64>(), run_seed in any::<u64>(), pendulum in any::<bool>()) {
        let spec = if pendulum { EnvSpec::pendulum() } else { EnvSpec::point_mass() };
        let p = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(seed)).unwrap();
        let prov = Provenance::new(run_seed, format!("cfg-{seed:016x}"));
        let bytes = encode(&p, &prov).unwrap();
        let (back, prov2): (UniversalPolicy, _) = decode(&bytes).unwrap();
        prop_assert_eq!(&prov2, &prov);
        prop_assert_eq!(encode(&back, &prov2).unwrap(), bytes);
        let probe = vec![0.3; spec.state_dim()];
        let theta = LatentParams::default();
        prop_assert_eq!(back.query(&probe, &theta).unwrap(), p.query(&probe, &theta).unwrap());
    }

    #[test]
    fn correction_policy_checkpoint_round_trips(seed in any::<u64>(), reset in any::<bool>()) {
        let spec = EnvSpec::point_mass();
        let options = RatOptions { reset, scale_reward: false };
        let p = RatPolicy::init(&spec, LatentParams::default(), GapSampler::default(), options, &small_net(), &mut rng_from(seed)).unwrap();
        let bytes = encode(&p, &Provenance::new(seed, "cfg-x")).unwrap();
        let (back, _): (RatPolicy, _) = decode(&bytes).unwrap();
        prop_assert_eq!(back, p);
    }
}
