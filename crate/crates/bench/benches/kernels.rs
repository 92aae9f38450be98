use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lorentz_core::dynamics::ProbeSettings;
use lorentz_core::lab::{run_ensemble, EnsembleConfig};
use lorentz_core::moments::{combinatorial_moment, ratio};
use lorentz_core::rng::stream_rng;
use lorentz_core::{Billiard, CellObservable, FlowObservable, OracleChain, TableConfig};
use std::hint::black_box;

fn billiard() -> Billiard {
    let probe = ProbeSettings {
        boundary_points: 1_000,
        directions: 1_000,
        flight_cap: 50.0,
    };
    Billiard::new(TableConfig::default_two_disk(), probe).expect("default table")
}

fn collision_map(c: &mut Criterion) {
    let b = billiard();
    let mut rng = stream_rng(1, 0);
    let start = b.sample_collision(&mut rng);
    c.bench_function("collision_map_1000", |bench| {
        bench.iter(|| {
            let mut x = start;
            for _ in 0..1_000 {
                x = match b.map(&x) {
                    Ok((y, _)) => y,
                    Err(_) => start,
                };
            }
            black_box(x)
        })
    });
}

fn ensemble_step(c: &mut Criterion) {
    let b = billiard();
    let g = CellObservable::cell0();
    let f = CellObservable::dipole();
    let psi = FlowObservable::cell0();
    let cfg = EnsembleConfig {
        trajectories: 16,
        times: vec![1_000],
        grid: vec![1.0, 1.5, 2.0],
        ..Default::default()
    };
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    group.bench_function("16x2000_map_and_flow", |bench| {
        bench.iter(|| black_box(run_ensemble(&b, &cfg, &[("g0", &g), ("dipole", &f)], &[("psi", &psi)]).unwrap()))
    });
    group.finish();
}

fn moments(c: &mut Criterion) {
    let (a, b, p, s0, s1) = (ratio(1, 2), ratio(3, 1), ratio(2, 7), ratio(5, 3), ratio(1, 4));
    c.bench_function("combinatorial_moment_m8", |bench| {
        bench.iter(|| black_box(combinatorial_moment(8, &a, &b, &p, &s0, &s1).unwrap()))
    });
}

fn oracle_spectrum(c: &mut Criterion) {
    let chain = OracleChain::persistent_lazy_walk(0.5).unwrap();
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    group.bench_function("twisted_spectrum_21", |bench| {
        bench.iter_batched(|| chain.clone(), |ch| black_box(ch.twisted_spectrum(21, 20)), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, collision_map, ensemble_step, moments, oracle_spectrum);
criterion_main!(benches);
