//! Parallel versus forced-sequential throughput of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtree_core::exec;
use mtree_core::model::{Architecture, Model};
use mtree_core::nn::Mode;
use mtree_core::objective::LossWeights;
use mtree_core::synth::{generate, SynthConfig};

const BATCH: usize = 32;

fn bench_inference(c: &mut Criterion) {
    let model = Model::<f32>::new(Architecture::standard(), 0).unwrap();
    let ts = generate(&SynthConfig {
        n_blocks: 1,
        trials_per_block: BATCH,
        ..Default::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..BATCH).collect();
    let (eeg, em, labels) = ts.gather(&idx);

    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for parallel in [true, false] {
        let name = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::new(name, BATCH), &parallel, |b, &p| {
            b.iter(|| {
                let run = || model.infer(&eeg, &em, BATCH).unwrap();
                if p {
                    run()
                } else {
                    exec::sequential(run)
                }
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let terms = model.net.architecture().terms();
    for parallel in [true, false] {
        let name = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::new(name, BATCH), &parallel, |b, &p| {
            b.iter(|| {
                let run = || {
                    let mut grads = model.params.zeros_like();
                    let mut buf = model.buffers.clone();
                    model
                        .net
                        .step(&model.params, &mut buf, &eeg, &em, &labels, Mode::train(7), terms, LossWeights::default(), Some(&mut grads))
                        .unwrap()
                };
                if p {
                    run()
                } else {
                    exec::sequential(run)
                }
            })
        });
    }
    group.finish();
}

fn bench_synth(c: &mut Criterion) {
    let cfg = SynthConfig {
        n_blocks: 4,
        trials_per_block: 100,
        ..Default::default()
    };
    let mut group = c.benchmark_group("synth");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| generate(&cfg).unwrap()));
    group.bench_function("sequential", |b| b.iter(|| exec::sequential(|| generate(&cfg).unwrap())));
    group.finish();
}

criterion_group!(benches, bench_inference, bench_synth);
criterion_main!(benches);
