use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fgse_bench::fixture;
use fgse_core::wls_se::{solve_approximative, solve_exact};

const CASES: [&str; 3] = ["ieee14", "ieee30", "ieee118"];
const SAMPLES: usize = 100;

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference_100_samples");
    group.sample_size(10);
    for case in CASES {
        let f = fixture(case, SAMPLES, 0).expect("fixture");
        let n = f.system.n_buses();
        group.bench_with_input(BenchmarkId::new("wls_exact", n), &f, |b, f| {
            b.iter(|| f.models.iter().map(|m| solve_exact(m).unwrap()).collect::<Vec<_>>())
        });
        group.bench_with_input(BenchmarkId::new("wls_approximative", n), &f, |b, f| {
            b.iter(|| f.models.iter().map(|m| solve_approximative(m).unwrap()).collect::<Vec<_>>())
        });
        group.bench_with_input(BenchmarkId::new("gnn", n), &f, |b, f| {
            b.iter(|| f.gnn.predict_many(&f.graphs, 32).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
