use cmn_core::baselines::{run_baseline, BaselineKind};
use cmn_core::consolidation::cross_entropy_soft;
use cmn_core::nn::count_params;
use cmn_core::tasks::{gen_noise_task, gen_synthetic_tasks, Provenance, Which};
use cmn_core::trainer::{consolidate_phase, run_sequence, train_plain, train_short_phase, EvalScope};
use cmn_core::*;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn config(dim: usize, width: usize) -> RunConfig {
    let mut cfg = RunConfig::new(ModelConfig::new(NetworkSpec::tiny_mlp(dim, width, 1)));
    cfg.curves = false;
    cfg
}

/// Plain batch gradient descent on softmax regression; an oracle that shares
/// no code with the crate's layers or optimizer.
fn logistic_accuracy(task: &TaskDataset) -> f64 {
    let d = task.input.numel();
    let c = task.classes;
    let mut w = vec![0.0; c * (d + 1)];
    let n = task.train.len();
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| w[k * (d + 1) + d] + (0..d).map(|i| w[k * (d + 1) + i] * x[i]).sum::<f64>())
            .collect()
    };
    for _ in 0..300 {
        let mut grad = vec![0.0; w.len()];
        for s in 0..n {
            let x = &task.train.x[s * d..(s + 1) * d];
            let z = scores(&w, x);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for k in 0..c {
                let delta = e[k] / sum - f64::from(u8::from(task.train.y[s] == k));
                for i in 0..d {
                    grad[k * (d + 1) + i] += delta * x[i] / n as f64;
                }
                grad[k * (d + 1) + d] += delta / n as f64;
            }
        }
        w.iter_mut().zip(&grad).for_each(|(p, g)| *p -= 0.5 * g);
    }
    let test = &task.test;
    let hits = (0..test.len())
        .filter(|&s| {
            let z = scores(&w, &test.x[s * d..(s + 1) * d]);
            let best = (0..c).fold(0, |b, k| if z[k] > z[b] { k } else { b });
            best == test.y[s]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn separable_blobs_admit_a_perfect_linear_classifier() {
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 16, 6.0, 11), 2).unwrap();
    for task in &seq.tasks {
        let acc = logistic_accuracy(task);
        assert!(acc >= 0.99, "{}: {acc}", task.name);
    }
}

#[test]
fn one_reaches_the_linear_oracle() {
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 16, 6.0, 11), 2).unwrap();
    let out = run_baseline::<f64>(BaselineKind::One, &seq, &config(16, 32), 0).unwrap();
    for (task, m) in seq.tasks.iter().zip(&out.per_task) {
        assert!(*m >= 0.99, "{}: {m}", task.name);
    }
}

#[test]
fn zero_separation_is_chance() {
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let mut spec = SyntheticSpec::blobs(2, 8, 0.0, seed);
            spec.test_per_class = 1000;
            let seq = gen_synthetic_tasks(&spec, 1).unwrap();
            run_baseline::<f64>(BaselineKind::One, &seq, &config(8, 16).with_epochs(20), seed).unwrap().per_task[0]
        })
        .collect();
    let m = median(accs.clone());
    assert!((m - 0.5).abs() <= 0.03, "{accs:?}");
}

#[test]
fn noise_task_is_unlearnable() {
    let input = InputShape::Vector { dim: 8 };
    for seed in 0..5 {
        let task = gen_noise_task(input, 2, 2000, seed).unwrap();
        let spec = NetworkSpec::tiny_mlp(8, 16, 2);
        let mut net = nn::init_params::<f64>(&spec, InitScheme::FanInUniform, seed).unwrap();
        let opt = OptimizerConfig { epochs: 20, ..OptimizerConfig::short_default() };
        train_plain(&mut net, &task, 0, &opt, rng::stream(seed, &[]), 1, false, &mut TrainLog::default()).unwrap();
        let acc = trainer::evaluate_network(&net, &task, Which::Test, 0..2).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn joint_matches_one_without_interference() {
    let (mut gaps0, mut gaps1) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 32, 6.0, seed), 2).unwrap();
        let cfg = config(32, 32);
        let one = run_baseline::<f64>(BaselineKind::One, &seq, &cfg, seed).unwrap().per_task;
        let joint = run_baseline::<f64>(BaselineKind::Joint, &seq, &cfg, seed).unwrap().per_task;
        gaps0.push((one[0] - joint[0]).abs());
        gaps1.push((one[1] - joint[1]).abs());
    }
    assert!(median(gaps0.clone()) <= 0.03, "{gaps0:?}");
    assert!(median(gaps1.clone()) <= 0.03, "{gaps1:?}");
}

#[test]
fn finetune_forgets_a_disjoint_first_task() {
    let drops: Vec<f64> = (0..5)
        .map(|seed| {
            let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 16, 6.0, seed), 2).unwrap();
            let out = run_baseline::<f64>(BaselineKind::Finetune, &seq, &config(16, 32), seed).unwrap();
            let r = out.matrix.unwrap();
            r.get(0, 0).unwrap() - r.get(1, 0).unwrap()
        })
        .collect();
    assert!(median(drops.clone()) >= 0.20, "{drops:?}");
}

#[test]
fn identical_tasks_are_not_forgotten() {
    let gaps: Vec<f64> = (0..5)
        .map(|seed| {
            let base = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 16, 6.0, seed), 1).unwrap();
            let task = base.tasks[0].clone();
            let seq = TaskSequence::new(vec![task.clone(), task], Provenance::Synthetic).unwrap();
            let mut cfg = config(16, 32);
            cfg.eval_scope = EvalScope::TaskAware;
            cfg.long.lr = 0.02;
            let r = run_sequence::<f64>(&seq, &cfg, seed).unwrap().matrix;
            r.get(1, 0).unwrap() - r.get(1, 1).unwrap()
        })
        .collect();
    assert!(median(gaps.clone()) >= -0.05, "{gaps:?}");
}

/// Mean over rows of `CE(softmax(short), softmax(long[:, -C..]))`, evaluated
/// with the scalar reference implementation.
fn soft_term(short: &Tensor<f64>, long: &Tensor<f64>) -> f64 {
    let softmax = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let (rows, c, w) = (short.shape()[0], short.shape()[1], long.shape()[1]);
    (0..rows)
        .map(|i| {
            let p = softmax(&short.data()[i * c..(i + 1) * c]);
            let q = softmax(&long.data()[i * w + w - c..(i + 1) * w]);
            cross_entropy_soft(&p, &q).unwrap()
        })
        .sum::<f64>()
        / rows as f64
}

#[test]
fn pure_distillation_tracks_the_short_network() {
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 16, 6.0, 5), 2).unwrap();
    let mut cfg = config(16, 32);
    cfg.consolidation = ConsolidationConfig { temperature: 1.0, beta: 1.0 };
    cfg.long.lr = 0.01;
    let seed = 3;
    let mut state = CmnState::<f64>::new(cfg.model.clone()).unwrap();
    let mut log = TrainLog::default();
    state.begin_task(2, seed).unwrap();
    train_short_phase(&mut state, &seq.tasks[0], &cfg.short, seed, false, &mut log).unwrap();
    state.promote_first_task().unwrap();
    state.begin_task(2, seed).unwrap();
    train_short_phase(&mut state, &seq.tasks[1], &cfg.short, seed, false, &mut log).unwrap();
    state.expand_long_head(seed).unwrap();

    let (x, _) = seq.tasks[1].all::<f64>(Which::Train).unwrap();
    let short = state.forward_short(&x).unwrap();
    let losses: Vec<f64> = (0..=5)
        .map(|epochs| {
            let mut s = state.clone();
            let opt = OptimizerConfig { epochs, patience: None, ..cfg.long };
            consolidate_phase(&mut s, &seq.tasks[1], &seq.tasks, &opt, &cfg.consolidation, cfg.eval_scope, seed, false, &mut TrainLog::default())
                .unwrap();
            assert_eq!(s.forward_short(&x).unwrap(), short, "short-term outputs must not move");
            soft_term(&short, &s.long_net().unwrap().logits(&x).unwrap())
        })
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn parameter_accounting_matches_hand_formulas() {
    let (d, w) = (6usize, 5usize);
    let mut spec = SyntheticSpec::blobs(2, d, 6.0, 1);
    spec.train_per_class = 10;
    spec.test_per_class = 10;
    let seq = gen_synthetic_tasks(&spec, 3).unwrap();
    let cfg = config(d, w).with_epochs(1);
    let out = run_sequence::<f64>(&seq, &cfg, 0).unwrap();

    let body = d * w + w + w * w + w;
    let head = |classes: usize| classes * (w + 1);
    let eca = nn::EcaParams::<f64>::adaptive_kernel_size(w);
    let cell = eca + w * w + w * w + w * w + w;
    assert_eq!(out.params.test_params, body + head(6));
    assert_eq!(out.params.training_params, body + head(6) + body + head(2) + 2 * cell);

    let single = nn::init_params::<f64>(&NetworkSpec::tiny_mlp(d, w, 2), InitScheme::FanInUniform, 0).unwrap();
    assert_eq!(count_params(&single), body + head(2));
    assert_eq!(out.params.test_params - count_params(&single), head(4));
    let report = ParamReport::single(&single);
    assert_eq!(report.test_params, report.training_params);
}
