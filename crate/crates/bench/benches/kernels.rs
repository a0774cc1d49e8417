use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ncart_bench::random_matrix;
use ncart_core::sparse::{entmax, sparsemax};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for (rows, inner, cols) in [(1024, 8, 16), (1024, 16, 2), (1024, 16, 16)] {
        let a = random_matrix(rows, inner, 1);
        let b = random_matrix(inner, cols, 2);
        let bt = b.transpose();
        let id = format!("{rows}x{inner}x{cols}");
        group.bench_function(BenchmarkId::new("nn", &id), |bench| bench.iter(|| black_box(&a).matmul(&b).unwrap()));
        group.bench_function(BenchmarkId::new("nt", &id), |bench| bench.iter(|| black_box(&a).matmul_nt(&bt).unwrap()));
        let g = random_matrix(rows, cols, 3);
        group.bench_function(BenchmarkId::new("tn", &id), |bench| bench.iter(|| black_box(&a).matmul_tn(&g).unwrap()));
    }
    group.finish();
}

fn sparse_maps(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparse");
    for d in [4, 16, 64] {
        let z = random_matrix(1, d, 4).into_vec();
        group.bench_with_input(BenchmarkId::new("sparsemax", d), &z, |b, z| b.iter(|| sparsemax(black_box(z)).unwrap()));
        group.bench_with_input(BenchmarkId::new("entmax15", d), &z, |b, z| b.iter(|| entmax(black_box(z), 1.5).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, sparse_maps);
criterion_main!(benches);
