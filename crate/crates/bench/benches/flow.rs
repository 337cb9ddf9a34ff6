use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use feasflow_core::base::gaussian_sample;
use feasflow_core::eval::{auroc, cosine_similarity_matrix};
use feasflow_core::ocsvm::{self, OcSvmConfig};
use feasflow_core::{BaseKind, FlowConfig, FlowModel};

fn flow(base_kind: BaseKind, layers: usize) -> FlowModel {
    let cfg = FlowConfig {
        num_coupling_layers: layers,
        identity_init: false,
        base_kind,
        ..Default::default()
    };
    FlowModel::new(&cfg, 1).unwrap()
}

fn log_prob(c: &mut Criterion) {
    let rows = 256;
    let x = gaussian_sample(94, rows, 2);
    let mut g = c.benchmark_group("log_prob_batch");
    g.throughput(Throughput::Elements(rows as u64));
    for layers in [16, 64] {
        let m = flow(BaseKind::Gaussian, layers);
        g.bench_function(format!("gaussian_{layers}_layers"), |b| {
            b.iter(|| m.log_prob_batch(black_box(&x), rows).unwrap())
        });
    }
    let m = flow(BaseKind::Resampling, 16);
    g.bench_function("resampling_16_layers", |b| b.iter(|| m.log_prob_batch(black_box(&x), rows).unwrap()));
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let rows = 32;
    let x = gaussian_sample(94, rows, 3);
    let mut g = c.benchmark_group("nll_grad");
    g.throughput(Throughput::Elements(rows as u64));
    for (name, kind) in [("gaussian", BaseKind::Gaussian), ("resampling", BaseKind::Resampling)] {
        let m = flow(kind, 16);
        let mut grads = m.zero_grads();
        let est = m
            .base()
            .as_resampling()
            .map(|b| b.estimate_acceptance(&gaussian_sample(94, 1024, 4), 1024).unwrap());
        g.bench_function(format!("{name}_16_layers_batch_32"), |b| {
            b.iter(|| m.nll_grad_into(black_box(&x), rows, est.as_ref(), &mut grads).unwrap())
        });
    }
    g.finish();
}

fn inversion(c: &mut Criterion) {
    let rows = 256;
    let m = flow(BaseKind::Gaussian, 16);
    let z = gaussian_sample(94, rows, 5);
    c.bench_function("forward_batch_16_layers", |b| b.iter(|| m.forward_batch(black_box(&z), rows).unwrap()));
}

fn baseline(c: &mut Criterion) {
    let rows = 1000;
    let x = gaussian_sample(16, rows, 6);
    let cfg = OcSvmConfig::default();
    let mut g = c.benchmark_group("ocsvm");
    g.sample_size(10);
    g.bench_function("fit_1000x16", |b| b.iter(|| ocsvm::fit(black_box(&x), rows, 16, &cfg).unwrap()));
    let model = ocsvm::fit(&x, rows, 16, &cfg).unwrap().model;
    g.bench_function("score_1000x16", |b| b.iter(|| model.score_batch(black_box(&x), rows).unwrap()));
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let n = 10_000;
    let s = gaussian_sample(1, n, 7);
    let labels: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    c.bench_function("auroc_10000", |b| b.iter(|| auroc(black_box(&s), &labels).unwrap()));
    let v = gaussian_sample(94, 500, 8);
    c.bench_function("cosine_matrix_500x94", |b| {
        b.iter_batched(|| v.clone(), |v| cosine_similarity_matrix(&v, 500, 94).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, log_prob, training_step, inversion, baseline, metrics);
criterion_main!(benches);
