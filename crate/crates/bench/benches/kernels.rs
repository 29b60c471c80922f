use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc_core::calibration::{calibrate, transfer_matrix};
use sdc_core::{hungarian, kmeans, sinkhorn_pseudo_labels, Matrix};
use std::hint::black_box;

fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn sinkhorn(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinkhorn");
    for k in [8, 32, 150] {
        let logits = random(128, k, 1.0, k as u64);
        g.bench_with_input(BenchmarkId::from_parameter(k), &logits, |b, l| {
            b.iter(|| sinkhorn_pseudo_labels(black_box(l), 0.05, 500, 1e-6).unwrap())
        });
    }
    g.finish();
}

fn assignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    for n in [8, 64, 150] {
        let cost = random(n, n, 100.0, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, m| {
            b.iter(|| hungarian(black_box(m)).unwrap())
        });
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let x = random(2000, 32, 1.0, 7);
    c.bench_function("kmeans_2000x32_k16", |b| {
        b.iter(|| kmeans(black_box(&x), 16, 50, 1e-6, 0).unwrap())
    });
}

fn calibration(c: &mut Criterion) {
    let (m, n) = (75, 75);
    let protos = random(m + n, 64, 1.0, 3);
    let t = transfer_matrix(&protos, m).unwrap();
    let original = random(1, m + n, 3.0, 4).into_vec();
    let biased = random(1, m, 3.0, 5).into_vec();
    c.bench_function("calibrate_150", |b| {
        b.iter(|| calibrate(black_box(&original), black_box(&biased), 0.03, &t).unwrap())
    });
}

criterion_group!(benches, sinkhorn, assignment, clustering, calibration);
criterion_main!(benches);
