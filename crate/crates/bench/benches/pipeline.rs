//! Hot paths of the pipeline: trace generation, network passes, CPA and
//! rank-curve evaluation.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use deepsca_core::aes::sbox;
use deepsca_core::attack::average_rank_curve_from_probs;
use deepsca_core::analysis::cpa;
use deepsca_core::engine::{train, TrainingConfig};
use deepsca_core::netspec::{build_attention_network, Mode};
use deepsca_core::traces::{compute_labels, synthesize};
use deepsca_core::{
    CbamConfig, LeakageModel, NetworkConfig, PowerModel, SynthConfig, TraceSet,
};

fn synth(n: usize, d: usize) -> TraceSet {
    synthesize(&SynthConfig {
        n_traces: n,
        n_samples: d,
        leak_positions: vec![d / 2],
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_net(d: usize, channels: usize) -> NetworkConfig {
    NetworkConfig {
        input_length: d,
        n1: 1,
        n3: 1,
        filters_per_block: vec![channels],
        fc_hidden_units: 64,
        cbam: CbamConfig { enabled: true, reduction_ratio: 2, ..CbamConfig::default() },
        ..NetworkConfig::default()
    }
}

fn bench_synthesize(c: &mut Criterion) {
    c.bench_function("synthesize 2000x700", |b| b.iter(|| black_box(synth(2000, 700))));
}

fn bench_labels(c: &mut Criterion) {
    let ts = synth(10_000, 32);
    let lm = LeakageModel::Sbox { byte_index: 1 };
    let key = ts.fixed_key().unwrap();
    c.bench_function("compute_labels 10k traces", |b| {
        b.iter(|| black_box(compute_labels(&ts, &lm, &key).unwrap()))
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let ts = synth(32, 700);
    let mut graph = build_attention_network(&small_net(700, 32), 1).unwrap();
    c.bench_function("forward batch 32 x 700", |b| {
        b.iter(|| black_box(graph.forward(&ts.samples, Mode::Eval, None)))
    });
    let logits = graph.forward(&ts.samples, Mode::Train, None);
    let dlogits = Array2::from_elem(logits.dim(), 1.0 / 256.0);
    c.bench_function("backward batch 32 x 700", |b| {
        b.iter(|| {
            graph.zero_grads();
            black_box(graph.backward_from_logits(&dlogits))
        })
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let ts = synth(500, 100);
    let lm = LeakageModel::Sbox { byte_index: 1 };
    let key = ts.fixed_key().unwrap();
    let labels = compute_labels(&ts, &lm, &key).unwrap();
    let net = small_net(100, 16);
    let cfg = TrainingConfig { epochs: 1, ..TrainingConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one epoch, 500 x 100", |b| {
        b.iter(|| {
            let graph = build_attention_network(&net, 1).unwrap();
            black_box(train(graph, &ts.samples, &labels, &cfg).unwrap())
        })
    });
    group.finish();
}

fn bench_cpa(c: &mut Criterion) {
    let ts = synth(2000, 700);
    let lm = LeakageModel::Sbox { byte_index: 1 };
    let mut group = c.benchmark_group("cpa");
    group.sample_size(10);
    group.bench_function("256 x 700 on 2000 traces", |b| {
        b.iter(|| black_box(cpa(&ts, &lm, PowerModel::HammingWeight).unwrap()))
    });
    group.finish();
}

fn bench_rank_curve(c: &mut Criterion) {
    let n = 2000;
    let probs = Array2::from_shape_fn((n, 256), |(j, k)| ((j * 31 + k * 17) % 97 + 1) as f64);
    let labels = Array2::from_shape_fn((n, 256), |(j, k)| sbox((j % 256) as u8 ^ k as u8));
    c.bench_function("rank curve 100 x 100 from 2000 traces", |b| {
        b.iter(|| {
            black_box(average_rank_curve_from_probs(&probs, &labels, 77, 100, 100, 5).unwrap())
        })
    });
}

criterion_group!(
    benches,
    bench_synthesize,
    bench_labels,
    bench_forward_backward,
    bench_train_epoch,
    bench_cpa,
    bench_rank_curve
);
criterion_main!(benches);
