use barrons_core::ada::LeaderObjective;
use barrons_core::markets::generate;
use barrons_core::*;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn market(kind: MarketKind, n: usize, t: usize) -> (ProblemDims, Vec<MarketRound>) {
    let dims = ProblemDims::new(n, t).unwrap();
    (dims, generate(&MarketSpec::new(kind, dims, 1)).unwrap())
}

fn solver(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    for n in [2usize, 5] {
        let (dims, rounds) = market(MarketKind::IidLognormal, n, 1024);
        let obj = LeaderObjective { rounds: &rounds[..256], inv_gamma: 25.0 };
        c.bench_function(&format!("leader_solve_n{n}_256_rounds"), |b| {
            b.iter(|| minimize_over_clipped_simplex(&obj, &dims.uniform(), &dims, &cfg).unwrap())
        });
    }
}

fn barrons_step(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let (dims, rounds) = market(MarketKind::IidLognormal, 5, 1024);
    let mut warm = BarronsState::new(dims, 0.5, ada::default_eta(&dims)).unwrap();
    for r in &rounds[..100] {
        warm.step(r, &cfg).unwrap();
    }
    c.bench_function("barrons_step_n5", |b| {
        b.iter_batched(|| warm.clone(), |mut s| s.step(&rounds[100], &cfg).unwrap(), BatchSize::SmallInput)
    });
}

fn ada_run(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let mut group = c.benchmark_group("ada_run");
    group.sample_size(10);
    for kind in [MarketKind::Blowup, MarketKind::CoverAlternating] {
        let (dims, rounds) = market(kind, 2, 256);
        group.bench_function(kind.name(), |b| {
            b.iter(|| {
                let mut s = AdaState::new(dims, AdaConfig::defaults(&dims)).unwrap();
                for r in &rounds {
                    s.step(r, &cfg).unwrap();
                }
                s.epoch_index()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, solver, barrons_step, ada_run);
criterion_main!(benches);
