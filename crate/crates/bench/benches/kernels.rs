use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use xnet_bench::random;
use xnet_core::config::ShiftFill;
use xnet_core::drm::{build_pyramid, lk_flow, LkParams};
use xnet_core::fim::{sfts_shift, ShiftOrder};
use xnet_core::tensor::kernels::matmul;
use xnet_core::tensor::roi::roi_align;
use xnet_core::Tensor;

fn gemm(c: &mut Criterion) {
    let a: Tensor<f32> = random(&[256, 864], 1);
    let b: Tensor<f32> = random(&[864, 512], 2);
    c.bench_function("matmul 256x864x512 f32", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
    let a: Tensor<f64> = random(&[256, 864], 1);
    let b: Tensor<f64> = random(&[864, 512], 2);
    c.bench_function("matmul 256x864x512 f64", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
}

fn roi(c: &mut Criterion) {
    let f: Tensor<f32> = random(&[192, 32, 32], 3);
    let boxes: Vec<[f64; 4]> = (0..256).map(|i| [10.0 + (i % 16) as f64, 12.0 + (i / 16) as f64, 14.0, 14.0]).collect();
    c.bench_function("roi_align 256 boxes", |bch| bch.iter(|| roi_align(black_box(&f), &boxes, 0.5).unwrap()));
}

fn shift(c: &mut Criterion) {
    let d: Tensor<f32> = random(&[96, 32, 32], 4);
    c.bench_function("channel-group shift 96x32x32", |bch| {
        bch.iter(|| sfts_shift(black_box(&d), ShiftOrder::Rgb, ShiftFill::Zero).unwrap())
    });
}

fn flow(c: &mut Criterion) {
    let a: Tensor<f32> = random(&[64, 64], 5);
    let b: Tensor<f32> = random(&[64, 64], 6);
    let pa = build_pyramid(&a, 3).unwrap();
    let pb = build_pyramid(&b, 3).unwrap();
    let pts: Vec<(f64, f64)> = (0..25).map(|i| (20.0 + (i % 5) as f64 * 5.0, 20.0 + (i / 5) as f64 * 5.0)).collect();
    let params = LkParams { window: 15, iters: 10, det_eps: 1e-6, max_flow: 100.0 };
    c.bench_function("pyramid 64x64 x3", |bch| bch.iter(|| build_pyramid(black_box(&a), 3).unwrap()));
    c.bench_function("lk 25 points", |bch| bch.iter(|| lk_flow(&pa, &pb, black_box(&pts), &params)));
}

criterion_group!(benches, gemm, roi, shift, flow);
criterion_main!(benches);
