use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ipr_bench::{leafcount, leafcount_model, logits};
use ipr_core::exactk::{self, AssignMode, ExactKRowDistribution};
use ipr_core::metrics;
use ipr_core::model::{Batch, Bound, Sampling};
use ipr_core::rng::SeedTree;
use ipr_core::tensor::{Tape, Tensor};
use ipr_core::training::{self, TaskHead, TaskKind};

fn bench_exactk(c: &mut Criterion) {
    let mut group = c.benchmark_group("exactk");
    for m in [4, 8, 32] {
        let theta = logits(m);
        group.bench_with_input(BenchmarkId::new("marginals", m), &theta, |b, t| {
            b.iter(|| exactk::marginals(black_box(t), m / 2).unwrap())
        });
        let dist = ExactKRowDistribution::new(&theta, m / 2).unwrap();
        let mut rng = SeedTree::new(0).rng();
        group.bench_with_input(BenchmarkId::new("sample", m), &dist, |b, d| b.iter(|| d.sample(&mut rng)));
    }
    let priors = Tensor::new(vec![256, 8], (0..256).flat_map(|_| logits(8)).collect()).unwrap();
    group.bench_function("sample_assignment_256x8", |b| {
        b.iter(|| exactk::sample_assignment(black_box(&priors), 3, 2, SeedTree::new(1)).unwrap())
    });
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let a = Tensor::full(&[256, 64], 0.5);
    let w = Tensor::full(&[64, 64], 0.25);
    c.bench_function("matmul_256x64x64", |b| b.iter(|| black_box(&a).matmul(black_box(&w)).unwrap()));
}

fn bench_step(c: &mut Criterion) {
    let depth = 4;
    let graphs = leafcount(depth, 32);
    let head = TaskHead { kind: TaskKind::Multiclass, out_dim: (1 << depth) + 1 };
    let mut group = c.benchmark_group("forward_backward_32_trees");
    for ds in [false, true] {
        let model = leafcount_model(depth, ds);
        let params = model.init_params(0);
        let refs: Vec<(u64, _)> = graphs.iter().enumerate().map(|(i, g)| (i as u64, g)).collect();
        let batch = Batch::new(&refs, model.spec.m).unwrap();
        let targets: Vec<_> = graphs.iter().map(|g| g.label().cloned()).collect();
        let name = if ds { "ipr" } else { "base" };
        group.bench_function(name, |b| {
            b.iter(|| {
                let tape = Tape::new();
                let p = Bound::new(&tape, &params);
                let sampling = Sampling { seeds: SeedTree::new(3), q: model.spec.q, mode: AssignMode::StraightThrough };
                let out = model.forward(&p, &batch, sampling).unwrap();
                let loss = training::loss(out.prediction, &targets, head).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_resistance(c: &mut Criterion) {
    let mut group = c.benchmark_group("effective_resistance");
    for depth in [3, 5] {
        let g = &leafcount(depth, 1)[0];
        group.bench_with_input(BenchmarkId::from_parameter(g.n()), g, |b, g| b.iter(|| metrics::effective_resistance(g)));
    }
    group.finish();
}

criterion_group!(sampler, bench_exactk);
criterion_group!(model, bench_matmul, bench_step);
criterion_group!(diagnostics, bench_resistance);
criterion_main!(sampler, model, diagnostics);
