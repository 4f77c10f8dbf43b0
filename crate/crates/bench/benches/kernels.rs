use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qseg_core::config::LossConfig;
use qseg_core::data::{build_samples, synth_generate, SynthConfig};
use qseg_core::nn::Session;
use qseg_core::rng::Rng;
use qseg_core::tensor::Conv2dSpec;
use qseg_core::train::loss_and_grads;
use qseg_core::{Graph, Model, ModelConfig};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let mut rng = Rng::seed(0);
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, side) in [(8, 64), (16, 32), (32, 16)] {
        let mut rng = Rng::seed(1);
        let x = rng.normal_tensor(&[ch, side, side], 1.0);
        let w = rng.normal_tensor(&[ch, ch, 3, 3], 0.1);
        group.bench_function(format!("{ch}x{side}x{side}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
                let y = g.conv2d(xv, wv, None, Conv2dSpec::same(3, 1)).unwrap();
                let loss = g.sum(y);
                g.backward(loss).unwrap();
                black_box(g.grad(wv));
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let syn = synth_generate(&SynthConfig {
        height: 64,
        width: 64,
        num_images: 1,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let samples = build_samples(&syn.dataset, &syn.images).unwrap();
    let cfg = ModelConfig {
        num_queries: 5,
        dim: 16,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 0).unwrap();
    let mut group = c.benchmark_group("model_64x64");
    group.sample_size(10);
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let mut s = Session::frozen(&model.params);
            black_box(model.forward(&mut s, &samples[0].image).unwrap());
        })
    });
    group.bench_function("loss_and_grads", |bench| {
        bench.iter(|| {
            black_box(loss_and_grads(&model, &[&samples[0]], &LossConfig::default()).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, conv2d, model);
criterion_main!(benches);
