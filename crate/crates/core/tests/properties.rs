//! Invariants across module boundaries, checked on random inputs.

use proptest::prelude::*;

use amm_exec::config::RunConfig;
use amm_exec::dgm::NetworkParams;
use amm_exec::estimation::{bin_samples, default_bins, fit_samples, Summary, Target};
use amm_exec::intensity::IntensityParams;
use amm_exec::market::{apply_spot_tick, apply_swap_x, apply_swap_y, MarketState, Policy, TickDirection};
use amm_exec::pide::{Scaling, A_MIN};
use amm_exec::strategy::policy_from_network;

fn reference() -> RunConfig {
    RunConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rates_are_probabilities_times_totals(delta in -50.0f64..50.0) {
        let p = IntensityParams::reference_sep2022();
        let r = p.rates(delta);
        for v in [r.kappa_plus, r.kappa_minus, r.lambda_x, r.lambda_y] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        prop_assert!(r.kappa_plus <= p.a_kappa && r.lambda_x <= p.a_lambda);
        prop_assert!((r.kappa_plus + r.kappa_minus - p.a_kappa).abs() <= 4.0 * f64::EPSILON * p.a_kappa);
    }

    #[test]
    fn scaling_round_trips(
        t in 0.0f64..900.0,
        s in 1.0f64..3000.0,
        rx in 1.0f64..1e5,
        ry in 1.0f64..1e8,
        z in 0.0f64..40.0,
    ) {
        let sc = reference().scaling().unwrap();
        let p = [t, s, rx, ry, z];
        let back = sc.to_original(&sc.to_normalized(&p));
        for (a, b) in p.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn swaps_move_the_pool_price_the_expected_way(
        rx in 1e3f64..1e5,
        price in 100.0f64..5000.0,
        pi in 0.01f64..10.0,
    ) {
        let m = MarketState::new(0.0, price, rx, rx * price).unwrap();
        let x = apply_swap_x(&m, pi, 0.003).unwrap();
        let y = apply_swap_y(&m, pi * price, 0.003).unwrap();
        prop_assert!(x.pool_price() < m.pool_price());
        prop_assert!(y.pool_price() > m.pool_price());
        let up = apply_spot_tick(&m, TickDirection::Up, 0.02, 0.02).unwrap();
        prop_assert!((up.spread() - (m.spread() - 0.02)).abs() < 1e-9);
    }

    #[test]
    fn summary_quartiles_are_ordered(sample in prop::collection::vec(0.0f64..1e3, 1..200)) {
        let s = Summary::of(&sample).unwrap();
        prop_assert_eq!(s.count, sample.len());
        prop_assert!(s.q25 <= s.q50 && s.q50 <= s.q75);
        let lo = sample.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= s.q25 && s.q75 <= hi);
        prop_assert!(s.mean >= lo - 1e-9 && s.mean <= hi + 1e-9 && s.std >= 0.0);
    }

    #[test]
    fn bins_partition_the_covered_range(
        samples in prop::collection::vec((-2.5f64..2.5, prop::bool::ANY), 0..500),
    ) {
        let samples: Vec<(f64, f64)> = samples.into_iter().map(|(d, b)| (d, b as u8 as f64)).collect();
        let bins = bin_samples(&samples, true, &default_bins()).unwrap();
        let inside = samples.iter().filter(|(d, _)| *d > -1.75 && *d <= 1.75).count();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), inside);
        for b in &bins {
            if let Some(v) = b.value {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_intensity_is_bounded(
        seed in 0u64..1000,
        t in 0.0f64..900.0,
        spread in -3.0f64..3.0,
        z in 0.0f64..40.0,
    ) {
        let cfg = reference();
        let net = NetworkParams::xavier(cfg.train.architecture, seed);
        let agent = cfg.agent_params().unwrap();
        let policy = policy_from_network(net, &cfg.model().unwrap(), &agent, cfg.scaling().unwrap()).unwrap();
        let rx = cfg.rx0();
        let m = MarketState::new(t, 1300.0, rx, (1300.0 + spread) * rx).unwrap();
        let l = policy.intensity(t, &m, z);
        prop_assert!((0.0..=agent.ell_max).contains(&l), "{l}");
        if z < agent.zeta {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn probability_fits_stay_in_the_unit_interval(
        slope in -3.0f64..3.0,
        level in -1.0f64..1.0,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(f64, f64)> = (0..400)
            .map(|_| {
                let d: f64 = rng.gen_range(-2.0..2.0);
                let p = 1.0 / (1.0 + (-(level + slope * d)).exp());
                (d, (rng.gen::<f64>() < p) as u8 as f64)
            })
            .collect();
        if let Ok(fit) = fit_samples(&samples, Target::PBuyPool, 4) {
            for i in 0..=40 {
                let v = fit.eval(-2.0 + 0.1 * i as f64);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

#[test]
fn training_box_contains_the_initial_state() {
    let cfg = reference();
    let sc: Scaling = cfg.scaling().unwrap();
    let m = cfg.initial_market().unwrap();
    let q = sc.to_normalized(&[0.0, m.s, m.r_x, m.r_y, cfg.agent.q]);
    assert!(Scaling::in_box(&q));
    assert!(q[2] >= A_MIN);
}
