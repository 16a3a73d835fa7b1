use std::hint::black_box;

use cmn_core::tasks::{gen_synthetic_tasks, Which};
use cmn_core::tensor::{conv2d, matmul};
use cmn_core::trainer::train_short_phase;
use cmn_core::{CmnState, ModelConfig, NetworkSpec, OptimizerConfig, SyntheticSpec, Tensor, TrainLog};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn filled(shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let (a, b) = (filled(vec![n, n]), filled(vec![n, n]));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let x = filled(vec![16, 8, 6, 6]);
    let k = filled(vec![8, 8, 3, 3]);
    c.bench_function("conv2d/16x8x6x6_k3", |b| b.iter(|| conv2d(black_box(&x), black_box(&k), 1).unwrap()));
}

/// Short-network forward pass through the transfer cells, with a trained
/// long-term network on the other side.
fn bench_transfer_forward(c: &mut Criterion) {
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 32, 3.0, 1), 2).unwrap();
    let mut state = CmnState::<f64>::new(ModelConfig::new(NetworkSpec::tiny_mlp(32, 32, 1))).unwrap();
    let opt = OptimizerConfig { epochs: 1, ..OptimizerConfig::short_default() };
    let mut log = TrainLog::default();
    state.begin_task(2, 1).unwrap();
    train_short_phase(&mut state, &seq.tasks[0], &opt, 1, false, &mut log).unwrap();
    state.promote_first_task().unwrap();
    state.begin_task(2, 1).unwrap();
    let (x, _) = seq.tasks[1].all::<f64>(Which::Test).unwrap();
    c.bench_function("transfer_forward/mlp32_batch200", |b| b.iter(|| state.forward_short(black_box(&x)).unwrap()));
}

criterion_group!(benches, bench_matmul, bench_conv2d, bench_transfer_forward);
criterion_main!(benches);
