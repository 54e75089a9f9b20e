//! Kernel throughput on the rayon pool against a single-thread pool. Built
//! with `--no-default-features` only the sequential fallback is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hybridnet::net::{toy_cnn_spec, Network};
use hybridnet::tensor::{conv2d, matmul};
use hybridnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut out = vec![("one_thread", one)];
    if hybridnet::par::is_parallel() {
        out.push(("rayon", rayon::ThreadPoolBuilder::new().build().unwrap()));
    } else {
        out[0].0 = "sequential";
    }
    out
}

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::random_uniform(dims.to_vec(), -1.0, 1.0, rng).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&[64, 1024], &mut rng);
    let b = uniform(&[1024, 256], &mut rng);
    let mut g = c.benchmark_group("matmul_64x1024x256");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| matmul(&a, &b).unwrap()))
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&[16, 64, 16, 16], &mut rng);
    let k = uniform(&[64, 64, 3, 3], &mut rng);
    let mut g = c.benchmark_group("conv2d_16x64x16x16_k3");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| conv2d(&x, &k, 1, 1).unwrap()))
        });
    }
    g.finish();
}

fn bench_train_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::random_uniform(vec![32, 3, 8, 8], 0.0, 1.0, &mut rng).unwrap();
    let labels: Vec<usize> = (0..32).map(|_| rng.gen_range(0..4)).collect();
    let mut g = c.benchmark_group("toy_cnn_train_batch_32");
    for (name, pool) in pools() {
        let mut net = Network::<f32>::from_spec(&toy_cnn_spec(4), &[3, 8, 8], 0).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| net.train_batch(&x, &labels).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_conv, bench_train_batch);
criterion_main!(benches);
