use cmn_core::nn::InputShape;
use cmn_core::trainer::{run_sequence, train_short_phase};
use cmn_core::tasks::gen_synthetic_tasks;
use cmn_core::{
    CmnState, ModelConfig, NetworkSpec, OptimizerConfig, RunConfig, SyntheticMode, SyntheticSpec, TrainLog,
};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn stripes() -> SyntheticSpec {
    SyntheticSpec {
        mode: SyntheticMode::StripedPatterns,
        input: InputShape::Image { channels: 1, height: 6, width: 6 },
        separation: 1.0,
        ..SyntheticSpec::blobs(2, 36, 1.0, 3)
    }
}

/// One short-phase epoch on task 2, long-term network in place.
fn bench_epoch(c: &mut Criterion, name: &str, spec: SyntheticSpec, backbone: NetworkSpec) {
    let seq = gen_synthetic_tasks(&spec, 2).unwrap();
    let opt = OptimizerConfig { epochs: 1, ..OptimizerConfig::short_default() };
    let mut base = CmnState::<f64>::new(ModelConfig::new(backbone)).unwrap();
    let mut log = TrainLog::default();
    base.begin_task(2, 5).unwrap();
    train_short_phase(&mut base, &seq.tasks[0], &opt, 5, false, &mut log).unwrap();
    base.promote_first_task().unwrap();
    base.begin_task(2, 5).unwrap();
    c.bench_function(name, |b| {
        b.iter_batched(
            || (base.clone(), TrainLog::default()),
            |(mut state, mut log)| train_short_phase(&mut state, &seq.tasks[1], &opt, 5, false, &mut log).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn bench_epochs(c: &mut Criterion) {
    bench_epoch(c, "short_epoch/mlp", SyntheticSpec::blobs(2, 32, 3.0, 3), NetworkSpec::tiny_mlp(32, 32, 1));
    let conv = NetworkSpec::tiny_conv(InputShape::Image { channels: 1, height: 6, width: 6 }, [8, 8], 1);
    bench_epoch(c, "short_epoch/conv", stripes(), conv);
}

fn bench_sequence(c: &mut Criterion) {
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 16, 6.0, 3), 2).unwrap();
    let cfg = RunConfig::new(ModelConfig::new(NetworkSpec::tiny_mlp(16, 16, 1))).with_epochs(2);
    let mut group = c.benchmark_group("sequence");
    group.sample_size(10);
    group.bench_function("two_tasks_2_epochs", |b| b.iter(|| run_sequence::<f64>(&seq, &cfg, 3).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_epochs, bench_sequence);
criterion_main!(benches);
