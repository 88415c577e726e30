use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sweepmatch::baselines::ncc;
use sweepmatch::data::{GrayImage, ProbePose};
use sweepmatch::encoder::{embed, init_params, EncoderConfig};
use sweepmatch::eval::TrainConfig;
use sweepmatch::sampler::label_pairs;
use sweepmatch::tensor::{Graph, Tensor};

fn desk_encoder() -> EncoderConfig {
    TrainConfig::from_toml(include_str!("../../../configs/desk.toml"))
        .expect("desk config")
        .encoder
}

fn noise(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.random())
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..30 * 8 * 32 * 32).map(|_| rng.random()).collect();
    let w: Vec<f32> = (0..16 * 8 * 9).map(|_| rng.random()).collect();
    let x = Tensor::new(vec![30, 8, 32, 32], x).unwrap();
    let w = Tensor::new(vec![16, 8, 3, 3], w).unwrap();
    c.bench_function("conv2d 30x8x32x32 -> 16, fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xi = g.leaf(x.clone().with_requires_grad(true));
            let wi = g.leaf(w.clone().with_requires_grad(true));
            let y = g.conv2d(xi, wi, None, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn encode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_params(&desk_encoder(), 0).unwrap();
    let images: Vec<GrayImage> = (0..64).map(|_| noise(32, 32, &mut rng)).collect();
    let refs: Vec<&GrayImage> = images.iter().collect();
    c.bench_function("embed 64 frames (desk encoder)", |b| {
        b.iter(|| black_box(embed(&params, &refs).unwrap()))
    });
}

fn labels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut poses = || -> Vec<ProbePose> {
        (0..30)
            .map(|_| ProbePose::new(0.0, 0.0, rng.random_range(0.0..150.0)))
            .collect()
    };
    let (p1, p2) = (poses(), poses());
    c.bench_function("label_pairs b=30", |b| b.iter(|| black_box(label_pairs(&p1, &p2, 10.0))));
}

fn ncc_pair(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (noise(128, 128, &mut rng), noise(128, 128, &mut rng));
    c.bench_function("ncc 128x128", |bch| bch.iter(|| black_box(ncc(&a, &b).unwrap())));
}

criterion_group!(benches, conv, encode, labels, ncc_pair);
criterion_main!(benches);
