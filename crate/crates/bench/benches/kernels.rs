use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hepaseg::boundary::{erode, StructuringElement};
use hepaseg::metrics::soft_dice_loss_tensor;
use hepaseg::model::{atrous_depthwise, forward_batch, init_params, scaled_attention, Forward};
use hepaseg::{no_grad, BinaryMask, ModelConfig, Padding, Tensor};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect(), shape).unwrap()
}

fn convolutions(c: &mut Criterion) {
    let x = ramp(&[1, 64, 64, 16]);
    let w = ramp(&[3, 3, 16, 16]);
    c.bench_function("conv2d 3x3 64x64x16", |b| {
        b.iter(|| no_grad(|| x.conv2d(black_box(&w), None, 1, Padding::Same, 1, 1).unwrap()))
    });
    let dw = ramp(&[3, 3, 1, 16]);
    c.bench_function("atrous depthwise d=4 64x64x16", |b| {
        b.iter(|| no_grad(|| atrous_depthwise(&x, black_box(&dw), None, 4).unwrap()))
    });
    c.bench_function("conv2d forward+backward 32x32x16", |b| {
        let x = ramp(&[1, 32, 32, 16]);
        b.iter(|| {
            let w = Tensor::param(w.to_vec(), w.shape()).unwrap();
            x.conv2d(&w, None, 1, Padding::Same, 1, 1).unwrap().sum().unwrap().backward().unwrap();
        })
    });
}

fn attention(c: &mut Criterion) {
    let q = ramp(&[8, 64, 32]);
    c.bench_function("scaled attention 8 heads 64 tokens", |b| {
        b.iter(|| no_grad(|| scaled_attention(black_box(&q), &q, &q).unwrap()))
    });
}

fn morphology_and_loss(c: &mut Criterion) {
    let disc = (0..256 * 256i32).map(|i| (i / 256 - 128).pow(2) + (i % 256 - 128).pow(2) < 90 * 90).collect();
    let m = BinaryMask::new(256, 256, disc).unwrap();
    c.bench_function("erode 256x256", |b| b.iter(|| erode(black_box(&m), StructuringElement::default()).unwrap()));
    let probs = Tensor::<f32>::full(1.0 / 3.0, &[4, 64, 64, 3]).unwrap();
    let labels: Vec<u8> = (0..4 * 64 * 64).map(|i| (i % 3) as u8).collect();
    c.bench_function("soft dice loss 4x64x64", |b| {
        b.iter(|| soft_dice_loss_tensor(black_box(&probs), &labels, 1e-6).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::scaled();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let x = ramp(&[1, 64, 64, 1]);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("scaled forward 64x64", |b| {
        b.iter(|| no_grad(|| forward_batch(&Forward::inference(&cfg, &params), black_box(&x)).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, convolutions, attention, morphology_and_loss, model);
criterion_main!(benches);
