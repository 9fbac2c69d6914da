//! Parallel-versus-sequential benchmarks for the data-parallel hot paths:
//! the raw matrix kernels, batch scene rendering with oracle detection,
//! denoiser forward passes across a batch, and DDIM sampling across seeds.
//!
//! The parallel variants run the same code inside rayon pools of different
//! sizes, so the comparison isolates scheduling from arithmetic. Results
//! are bit-identical across pool sizes by construction.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssr_core::clip::EMBED_DIM;
use ssr_core::diffusion::{ddim_sample, predict_noise, SampleConfig, UNetTiny};
use ssr_core::eval::Oracle;
use ssr_core::sprites::{generate_scene, Geometry};
use ssr_core::tensor::{matmul_nn, matmul_nn_seq, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_96x2304x1024");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (96, 2304, 1024);
    let a: Tensor<f32> = Tensor::randn(vec![m, k], &mut rng);
    let b: Tensor<f32> = Tensor::randn(vec![k, n], &mut rng);
    group.bench_function("sequential", |bench| {
        bench.iter_batched(
            || vec![0.0f32; m * n],
            |mut out| matmul_nn_seq(&a.data, &b.data, &mut out, m, k, n),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("row_parallel", |bench| {
        bench.iter_batched(
            || vec![0.0f32; m * n],
            |mut out| matmul_nn(&a.data, &b.data, &mut out, m, k, n),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn scenes(n: usize) -> Vec<ssr_core::sprites::SpriteScene> {
    (0..n as u64)
        .map(|s| generate_scene(Geometry::DESK, s, 1 + (s % 3) as usize).unwrap())
        .collect()
}

fn bench_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_detect_32_scenes");
    group.sample_size(10);
    let oracle = Oracle::new(Geometry::DESK);
    let images: Vec<Tensor<f32>> = scenes(32).iter().map(|s| s.render()).collect();

    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            images
                .iter()
                .map(|img| oracle.detect(img).unwrap().detections.len())
                .sum::<usize>()
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            images
                .par_iter()
                .map(|img| oracle.detect(img).unwrap().detections.len())
                .sum::<usize>()
        })
    });
    group.finish();
}

fn bench_denoiser_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("denoiser_forward_batch8");
    group.sample_size(10);
    let unet = UNetTiny::<f32>::new(Geometry::DESK, 200, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<Tensor<f32>> = (0..8).map(|_| Tensor::randn(vec![3, 32, 32], &mut rng)).collect();
    let ctx: Tensor<f32> = Tensor::randn(vec![12, EMBED_DIM], &mut rng);

    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            xs.iter()
                .map(|x| predict_noise(&unet, x, 10, &ctx, None).unwrap().data[0])
                .sum::<f32>()
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            xs.par_iter()
                .map(|x| predict_noise(&unet, x, 10, &ctx, None).unwrap().data[0])
                .sum::<f32>()
        })
    });
    group.finish();
}

fn bench_sampling_seeds(c: &mut Criterion) {
    let mut group = c.benchmark_group("ddim_4_seeds_5_steps");
    group.sample_size(10);
    let unet = UNetTiny::<f32>::new(Geometry::SMOKE, 50, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cond: Tensor<f32> = Tensor::randn(vec![12, EMBED_DIM], &mut rng);
    let uncond: Tensor<f32> = Tensor::randn(vec![12, EMBED_DIM], &mut rng);
    let cfg = |seed: u64| SampleConfig {
        steps: 5,
        seed,
        ..Default::default()
    };

    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            (0..4u64)
                .map(|s| {
                    ddim_sample(&unet, &cond, &uncond, None, &cfg(s)).unwrap().data[0]
                })
                .sum::<f32>()
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            (0..4u64)
                .into_par_iter()
                .map(|s| {
                    ddim_sample(&unet, &cond, &uncond, None, &cfg(s)).unwrap().data[0]
                })
                .sum::<f32>()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_oracle,
    bench_denoiser_batch,
    bench_sampling_seeds
);
criterion_main!(benches);
