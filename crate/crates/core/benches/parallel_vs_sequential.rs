use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vitsplice::augmentation::{gaussian_blur, sample_params_batch, AugmentationPolicy, ViewKind};
use vitsplice::descriptors::self_similarity_host;
use vitsplice::gradcheck::central_difference;
use vitsplice::{ExecPolicy, ImageTensor};

const POLICIES: [(&str, ExecPolicy); 2] = [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)];

fn image(side: usize) -> ImageTensor {
    ImageTensor::from_fn(side, side, |c, y, x| ((c * 13 + y * 7 + x * 3) % 29) as f32 / 28.0)
}

fn bench_selfsim(c: &mut Criterion) {
    let (rows, cols) = (785, 48);
    let keys: Vec<f64> = (0..rows * cols).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0 + 0.01).collect();
    let mut g = c.benchmark_group("self_similarity_host");
    for (name, policy) in POLICIES {
        g.bench_function(name, |b| {
            b.iter(|| self_similarity_host(black_box(&keys), rows, cols, policy).unwrap())
        });
    }
    g.finish();
}

fn bench_augmentation(c: &mut Criterion) {
    let policy = AugmentationPolicy::default();
    let mut g = c.benchmark_group("sample_params_batch");
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| {
            b.iter(|| sample_params_batch(ViewKind::Structure, 128, 128, &policy, 0, 1000, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_pixels(c: &mut Criterion) {
    let mut g = c.benchmark_group("pixel_ops");
    for side in [128, 512] {
        let img = image(side);
        for (name, policy) in POLICIES {
            g.bench_with_input(BenchmarkId::new(format!("blur/{name}"), side), &img, |b, img| {
                b.iter(|| gaussian_blur(img, 3, 1.0, policy))
            });
            g.bench_with_input(BenchmarkId::new(format!("resize/{name}"), side), &img, |b, img| {
                b.iter(|| img.resize(224, 224, policy).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_finite_difference(c: &mut Criterion) {
    let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
    let coords: Vec<usize> = (0..x.len()).collect();
    let f = |v: &[f64]| v.iter().map(|a| (a * a + 1.0).ln()).sum::<f64>();
    let mut g = c.benchmark_group("central_difference");
    for (name, policy) in POLICIES {
        g.bench_function(name, |b| b.iter(|| central_difference(f, black_box(&x), &coords, 1e-6, policy)));
    }
    g.finish();
}

criterion_group!(benches, bench_selfsim, bench_augmentation, bench_pixels, bench_finite_difference);
criterion_main!(benches);
