use lorentz_core::dynamics::ProbeSettings;
use lorentz_core::estimators::{green_kubo_variance, EstimatorConfig, TailModel};
use lorentz_core::lab::{run_ensemble, Clock, EnsembleConfig};
use lorentz_core::moments::{
    combinatorial_moment, limit_moment_closed, multiplicity_brute_force, multiplicity_cn, ratio,
};
use lorentz_core::oracle::OracleObservable;
use lorentz_core::rng::{derive_seed, stream_rng};
use lorentz_core::stats::{ks_statistic, Moments};
use lorentz_core::{Billiard, OracleChain, TableConfig};
use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use std::sync::OnceLock;

fn billiard() -> &'static Billiard {
    static B: OnceLock<Billiard> = OnceLock::new();
    B.get_or_init(|| {
        let probe = ProbeSettings {
            boundary_points: 400,
            directions: 400,
            flight_cap: 50.0,
        };
        Billiard::new(TableConfig::default_two_disk(), probe).unwrap()
    })
}

fn rational() -> impl Strategy<Value = BigRational> {
    (-20i64..=20, 1i64..=9).prop_map(|(p, q)| ratio(p, q))
}

fn composition() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..=3, 1..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn multiplicities_match_enumeration(parts in composition()) {
        let m: usize = parts.iter().sum();
        let exact = multiplicity_cn(m, &parts).unwrap();
        prop_assert_eq!(exact, BigInt::from(multiplicity_brute_force(m, &parts)));
    }

    #[test]
    fn assembled_moments_equal_closed_form(
        m in 1usize..=5,
        alpha in rational(),
        beta in rational(),
        phi0 in (1i64..=9, 1i64..=4).prop_map(|(p, q)| ratio(p, q)),
        s0 in rational(),
        s1 in rational(),
    ) {
        prop_assert!(combinatorial_moment(m, &alpha, &beta, &phi0, &s0, &s1).is_ok());
    }

    #[test]
    fn closed_moment_is_homogeneous(
        m in 0usize..=8,
        alpha in rational(),
        beta in rational(),
        c in rational(),
        sigma2 in (0i64..=9, 1i64..=5).prop_map(|(p, q)| ratio(p, q)),
    ) {
        let phi0 = ratio(3, 2);
        let base = limit_moment_closed(m, &alpha, &beta, &phi0, &sigma2);
        let scaled = limit_moment_closed(m, &(&c * &alpha), &(&c * &beta), &phi0, &sigma2);
        let cm = (0..m).fold(ratio(1, 1), |acc, _| acc * &c);
        prop_assert_eq!(scaled, base * cm);
    }

    #[test]
    fn ks_statistic_is_bounded(xs in prop::collection::vec(-5.0f64..5.0, 1..200)) {
        let cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
        let d = ks_statistic(&xs, cdf);
        prop_assert!(d <= 1.0);
        prop_assert!(d >= 0.5 / xs.len() as f64 - 1e-12);
    }

    #[test]
    fn merged_moments_equal_sequential(xs in prop::collection::vec(-1e3f64..1e3, 2..100), cut in 0usize..100) {
        let cut = cut.min(xs.len());
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..cut].iter().for_each(|&x| a.push(x));
        xs[cut..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.n, all.n);
        prop_assert!((a.mean() - all.mean()).abs() <= 1e-9 * (1.0 + all.mean().abs()));
        prop_assert!((a.variance() - all.variance()).abs() <= 1e-7 * (1.0 + all.variance()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn collision_map_is_time_reversible(seed in any::<u64>()) {
        let b = billiard();
        let x = b.sample_collision(&mut stream_rng(seed, 0));
        let (y, step) = b.map(&x).unwrap();
        let (back, back_step) = b.map(&y.reversed()).unwrap();
        let target = x.reversed();
        prop_assert_eq!(back.obstacle, target.obstacle);
        prop_assert_eq!(back_step.jump, [-step.jump[0], -step.jump[1]]);
        prop_assert!((back_step.tau - step.tau).abs() < 1e-9);
        for k in 0..2 {
            prop_assert!((back.velocity[k] - target.velocity[k]).abs() < 1e-8);
            prop_assert!((back.normal[k] - target.normal[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn green_kubo_scales_quadratically(c in prop_oneof![-8.0f64..-0.125, 0.125f64..8.0], seed in 0u64..1000) {
        let chain = OracleChain::lazy_walk();
        let f = OracleObservable { weights: lorentz_core::oracle::OracleWeights::One, cells: vec![([0, 0], 1.0), ([1, 0], -1.0)] };
        let cf = OracleObservable { cells: f.cells.iter().map(|&(a, w)| (a, c * w)).collect(), ..f.clone() };
        let cfg = EstimatorConfig {
            trajectories: 16,
            length: 200,
            pilot_trajectories: 8,
            window_cap: 20,
            window: Some(10),
            batches: 4,
            seed,
            tail: TailModel::None,
            direct_times: vec![],
            ..Default::default()
        };
        let r = green_kubo_variance(&chain, &[&f, &cf], &cfg).unwrap();
        prop_assert!((r[1].sigma2 - c * c * r[0].sigma2).abs() <= 1e-9 * (1.0 + (c * c * r[0].sigma2).abs()));
        prop_assert!((r[1].stderr - c.abs() * c.abs() * r[0].stderr).abs() <= 1e-9 * (1.0 + c * c * r[0].stderr));
    }

    #[test]
    fn ensembles_are_seed_deterministic(seed in any::<u64>()) {
        let chain = OracleChain::lazy_walk();
        let g = OracleObservable::indicator([0, 0]);
        let cfg = EnsembleConfig { trajectories: 8, seed, times: vec![50], grid: vec![1.0, 2.0], ..Default::default() };
        let a = run_ensemble(&chain, &cfg, &[("g", &g)], &[]).unwrap();
        let b = run_ensemble(&chain, &cfg, &[("g", &g)], &[]).unwrap();
        for s in [1.0, 2.0] {
            prop_assert_eq!(a.values(Clock::Map, 0, 50, s).unwrap(), b.values(Clock::Map, 0, 50, s).unwrap());
        }
    }

    #[test]
    fn derived_seeds_separate_labels(seed in any::<u64>()) {
        prop_assert_ne!(derive_seed(seed, "estimate"), derive_seed(seed, "limit_test"));
        prop_assert_eq!(derive_seed(seed, "oracle"), derive_seed(seed, "oracle"));
    }
}
