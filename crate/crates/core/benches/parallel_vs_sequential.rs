use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dslab::propagator::{self, EvolutionConfig};
use dslab::resolvent::{self, Regime, ResolventQuery, SweepOptions};
use dslab::{assemble, Complex64, DampingSpec, Exec, Grid, MetricSpec, WeightChoice};

fn op(exec: Exec, dim: usize, n: usize) -> dslab::DampedOperator {
    let grid = Arc::new(Grid::new(dim, n, 8.0).unwrap().with_exec(exec));
    assemble(
        &grid,
        &MetricSpec::conformal_bump(0.3, 1.0),
        &DampingSpec::gaussian(1.0, 1.5, 1.0),
        WeightChoice::Unit,
        None,
    )
    .unwrap()
}

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("apply_h_3d_32");
    for exec in [Exec::Sequential, Exec::Parallel] {
        let h = op(exec, 3, 32);
        let f = dslab::model::random_field(h.grid(), 1);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &f, |b, f| {
            b.iter(|| black_box(h.apply_h(f)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("ensemble_evolution_2d_64");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let h = op(exec, 2, 64);
        let data: Vec<_> = (0..4).map(|k| dslab::model::random_field(h.grid(), k)).collect();
        let cfg = EvolutionConfig::new(0.05, 0.5);
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| black_box(propagator::evolve_ensemble(&h, &data, &cfg)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("resolvent_sweep_1d_128");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let grid = Arc::new(Grid::new(1, 128, 8.0).unwrap().with_exec(exec));
        let h = assemble(
            &grid,
            &MetricSpec::identity(),
            &DampingSpec::gaussian(1.0, 1.5, 1.0),
            WeightChoice::Unit,
            None,
        )
        .unwrap();
        let z: Vec<Complex64> = (0..6).map(|k| Complex64::new(1.0 + k as f64, 0.1)).collect();
        let q = ResolventQuery::symmetric(z[0], 0, 1.0);
        let opts = SweepOptions {
            non_trapping: true,
            epsilon: 0.0,
            exec,
        };
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| black_box(resolvent::frequency_sweep(&h, Regime::High, &q, &z, &opts).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
