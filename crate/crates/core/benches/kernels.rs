//! Sequential vs row-parallel kernels.
//!
//! The `matmul*` groups run both executors in one binary. Adapter forward,
//! SVD and Procrustes use the build's default executor; compare them with
//! `cargo bench` and `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use logit_bridge::adapter::adapter_init;
use logit_bridge::numerics::{solve_procrustes, svd, Exec, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn execs() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &(n, k, m) in &[(256, 64, 256), (1024, 256, 1024)] {
        let a = random(n, k, 1);
        let b = random(k, m, 2);
        let bt = b.transpose();
        group.throughput(Throughput::Elements((n * k * m) as u64));
        for (name, exec) in execs() {
            let id = format!("{n}x{k}x{m}");
            group.bench_with_input(BenchmarkId::new(format!("ab/{name}"), &id), &exec, |bench, &e| {
                bench.iter(|| black_box(a.matmul_with(&b, e)))
            });
            group.bench_with_input(BenchmarkId::new(format!("abt/{name}"), &id), &exec, |bench, &e| {
                bench.iter(|| black_box(a.matmul_t_with(&bt, e)))
            });
            group.bench_with_input(BenchmarkId::new(format!("atb/{name}"), &id), &exec, |bench, &e| {
                bench.iter(|| black_box(a.t_matmul_with(&a, e)))
            });
        }
    }
    group.finish();
}

fn adapter_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("adapter_forward");
    for &(d, batch) in &[(64, 256), (256, 256)] {
        let adapter = adapter_init(d, d, 3).unwrap();
        let z = random(batch, d, 4).scale(0.5);
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_function(format!("d{d}_b{batch}"), |bench| bench.iter(|| black_box(adapter.forward(&z).unwrap())));
    }
    group.finish();
}

fn decompositions(c: &mut Criterion) {
    let mut group = c.benchmark_group("decompositions");
    group.sample_size(20);
    for &d in &[16, 64] {
        let a = random(d, d, 5);
        group.bench_function(format!("svd_{d}"), |bench| bench.iter(|| black_box(svd(&a).unwrap())));
        let h_t = random(512, d, 6);
        let h_s = random(512, d, 7);
        group.bench_function(format!("procrustes_{d}"), |bench| {
            bench.iter(|| black_box(solve_procrustes(&h_t, &h_s, 500.0).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, adapter_forward, decompositions);
criterion_main!(benches);
