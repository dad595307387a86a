use criterion::{criterion_group, criterion_main, Criterion};
use saaf_bench::toy_sample;
use saaf_core::data::{generate_facade, FacadeSpec, Style};
use saaf_core::pipeline::sample_loss;
use saaf_core::tensor::no_grad;
use saaf_core::LossWeights;
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let (bundle, sample) = toy_sample();
    let w = LossWeights::default();
    let mut g = c.benchmark_group("toy_model");
    g.sample_size(20);
    g.bench_function("loss_forward", |b| b.iter(|| black_box(no_grad(|| sample_loss(&bundle, &sample, &w)).unwrap())));
    g.bench_function("loss_forward_backward", |b| {
        b.iter(|| {
            let (parts, _) = sample_loss(&bundle, &sample, &w).unwrap();
            parts.total.backward().unwrap();
            bundle.params.zero_grads();
        })
    });
    g.finish();
}

fn facade(c: &mut Criterion) {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let spec = FacadeSpec::sample(&mut rng, Style::Photo, 64, 64);
    c.bench_function("generate_facade_64", |b| b.iter(|| black_box(generate_facade(&spec, 9).unwrap())));
}

criterion_group!(benches, forward_backward, facade);
criterion_main!(benches);
