use std::hint::black_box;

use corrdet_tensor::kernels::{gemm_nn, gemm_nt, gemm_sorted};
use corrdet_tensor::{Graph, ParamStore, Session, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// A one-thread pool takes the sequential path inside every kernel.
fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("rayon", all)]
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &n in &[64usize, 128, 256] {
        let a = random(n * n, 1);
        let b = random(n * n, 2);
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(format!("nn/{name}"), n), &n, |bch, &n| {
                pool.install(|| bch.iter(|| gemm_nn(black_box(&a), black_box(&b), n, n, n)))
            });
            group.bench_with_input(BenchmarkId::new(format!("nt/{name}"), n), &n, |bch, &n| {
                pool.install(|| bch.iter(|| gemm_nt(black_box(&a), black_box(&b), n, n, n)))
            });
            group.bench_with_input(BenchmarkId::new(format!("sorted/{name}"), n), &n, |bch, &n| {
                pool.install(|| bch.iter(|| gemm_sorted(black_box(&a), black_box(&b), n, n, n)))
            });
        }
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_backward");
    let mut params = ParamStore::new();
    params.insert("w", Tensor::from_vec(&[32, 16 * 9], random(32 * 16 * 9, 3)));
    params.insert("b", Tensor::zeros(&[32]));
    let x = Tensor::from_vec(&[16, 64, 64], random(16 * 64 * 64, 4));
    for (name, pool) in pools() {
        group.bench_function(name, |bch| {
            pool.install(|| {
                bch.iter(|| {
                    let g = Graph::new();
                    let s = Session::train(&g, &params);
                    let y = s.constant(x.clone()).conv2d(s.param("w"), s.param("b"), 3, 2, 1);
                    let mut grads = g.backward(y.mul(y).sum_all());
                    black_box(s.param_grads(&mut grads))
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, conv);
criterion_main!(benches);
