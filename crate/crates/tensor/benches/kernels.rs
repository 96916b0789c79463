//! Sequential vs. parallel kernel comparison. Build with default features to
//! get both series; `--no-default-features` benches the sequential path only.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowgen_tensor::kernels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let a = rand_vec(&mut rng, n * n);
        let b = rand_vec(&mut rng, n * n);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, _| {
            bench.iter(|| kernels::matmul_seq(black_box(&a), black_box(&b), n, n, n, &mut out));
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, _| {
            bench.iter(|| kernels::matmul_par(black_box(&a), black_box(&b), n, n, n, &mut out));
        });
    }
    group.finish();
}

fn bench_layer_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (rows, cols) = (512, 256);
    let x = rand_vec(&mut rng, rows * cols);
    let mut out = vec![0.0; rows * cols];
    let mut inv = vec![0.0; rows];
    let mut group = c.benchmark_group("layer_norm");
    group.bench_function("seq", |bench| {
        bench.iter(|| kernels::layer_norm_seq(black_box(&x), rows, cols, 1e-6, &mut out, &mut inv));
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |bench| {
        bench.iter(|| kernels::layer_norm_par(black_box(&x), rows, cols, 1e-6, &mut out, &mut inv));
    });
    group.finish();
}

fn bench_masked_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, cols) = (256, 256);
    let x = rand_vec(&mut rng, rows * cols);
    let mut mask = vec![0.0; rows * cols];
    for m in mask.iter_mut() {
        if rng.random::<f64>() < 0.4 {
            *m = kernels::MASK_BLOCKED;
        }
    }
    // keep a guaranteed-open key per row
    for i in 0..rows {
        mask[i * cols] = 0.0;
    }
    let mut out = vec![0.0; rows * cols];
    let mut group = c.benchmark_group("masked_softmax");
    group.bench_function("seq", |bench| {
        bench.iter(|| {
            let mut flags = Vec::new();
            kernels::masked_softmax_seq(black_box(&x), &mask, rows, cols, rows, &mut out, &mut flags);
        });
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |bench| {
        bench.iter(|| {
            let mut flags = Vec::new();
            kernels::masked_softmax_par(black_box(&x), &mask, rows, cols, rows, &mut out, &mut flags);
        });
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_layer_norm, bench_masked_softmax);
criterion_main!(benches);
