//! Sequential vs rayon execution on the hot loops: dense matmul, one
//! training step, and the per-layer spectra taken at every epoch.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankswitch_core::{exec, singular_values, DenseMatrix, Execution, ModelSpec, Network};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = DenseMatrix::random_normal(n, n, 1.0, &mut rng);
        let b = DenseMatrix::random_normal(n, n, 1.0, &mut rng);
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                bench.iter(|| black_box(a.matmul_with(&b, mode).unwrap()))
            });
        }
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::init(&ModelSpec::mlp(64, &[256, 256], 10), &mut rng).unwrap();
    let x = DenseMatrix::random_normal(64, 64, 1.0, &mut rng);
    let y: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let mut group = c.benchmark_group("forward_backward");
    for (name, mode) in MODES {
        group.bench_function(name, |bench| bench.iter(|| black_box(net.forward_backward(&x, &y, mode).unwrap())));
    }
    group.finish();
}

fn spectra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layers: Vec<DenseMatrix> = (0..8).map(|_| DenseMatrix::random_normal(128, 128, 1.0, &mut rng)).collect();
    let mut group = c.benchmark_group("layer_spectra");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| black_box(exec::map(mode, &layers, |w| singular_values(w).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, train_step, spectra);
criterion_main!(benches);
