use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dtcmr_bench::bench_subject;
use dtcmr_core::denoise::{Generator, GeneratorConfig};
use dtcmr_core::fitting::{average_repetitions, lls_fit};
use dtcmr_core::registration::{apply_shift, band_limited_test_image, estimate_shift};
use dtcmr_core::rng::{stream, tag};
use dtcmr_core::tensor::eig_sym3;
use rand::Rng;

fn bench_eig(c: &mut Criterion) {
    let mut rng = stream(1, &[tag("bench-eig")]);
    let tensors: Vec<[f64; 6]> = (0..1024)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0e-3..2.0e-3)))
        .collect();
    c.bench_function("eig_sym3_1024", |b| {
        b.iter(|| {
            for t in &tensors {
                black_box(eig_sym3(black_box(*t)).unwrap());
            }
        })
    });
}

fn bench_lls_fit(c: &mut Criterion) {
    let stack = bench_subject(2);
    let avg = average_repetitions(&stack).unwrap();
    c.bench_function("lls_fit_128x128", |b| {
        b.iter(|| black_box(lls_fit(black_box(&avg)).unwrap()))
    });
}

fn bench_registration(c: &mut Criterion) {
    let reference = band_limited_test_image(128, 128, 3);
    let moving = apply_shift(&reference, (1.37, -2.61));
    c.bench_function("estimate_shift_128_u100", |b| {
        b.iter(|| black_box(estimate_shift(&reference, &moving, 100).unwrap()))
    });
}

fn bench_generator(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    let generator = Generator::init(cfg, 4).unwrap();
    let mut rng = stream(5, &[tag("bench-gen")]);
    let x = ndarray::Array3::from_shape_simple_fn((6, 128, 128), || rng.random_range(-1.0..1.0));
    c.bench_function("generator_forward_128", |b| {
        b.iter(|| black_box(generator.forward(black_box(&x)).unwrap()))
    });
    c.bench_function("generator_forward_backward_128", |b| {
        b.iter(|| {
            let (y, tape) = generator.forward_train(&x).unwrap();
            let mut grads = generator.grad_zeros();
            let gx = generator.backward(&tape, &y, &mut grads);
            black_box(gx);
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_eig, bench_lls_fit, bench_registration, bench_generator
}
criterion_main!(benches);
