use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use amlora_core::autodiff::{Graph, OptimizerState};
use amlora_core::baselines::{finish_task, prepare_task, train_step, AdapterHyper, MethodName, MethodSpec};
use amlora_core::model::{build_model, Batch, Mode, Model, ModelConfig};

const HYPER: AdapterHyper = AdapterHyper { rank: 8, alpha: 32.0 };

fn model_with_tasks(method: &MethodSpec, tasks: usize) -> Model {
    let mut m = build_model(&ModelConfig::default(), 0).unwrap();
    for pos in 0..tasks {
        prepare_task(&mut m, method, pos, HYPER, 0).unwrap();
        if pos + 1 < tasks {
            finish_task(&mut m, method);
        }
    }
    m
}

fn batch(m: &Model, b: usize) -> (Batch, Vec<usize>) {
    let seq = m.config.seq_len;
    let ids = (0..b * seq).map(|i| (i * 37 + 11) % m.config.vocab_size).collect();
    (Batch::Tokens { ids, batch: b }, (0..b).map(|i| i % m.config.num_classes).collect())
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("eval_forward");
    for tasks in [1, 4] {
        for name in [MethodName::IncLora, MethodName::AmLora] {
            let m = model_with_tasks(&MethodSpec::new(name), tasks);
            let (b, _) = batch(&m, 8);
            group.bench_with_input(BenchmarkId::new(name.as_str(), tasks), &tasks, |bench, _| {
                bench.iter(|| {
                    let mut g = Graph::inference();
                    black_box(m.forward(&mut g, &b, Mode::Eval, None, false).unwrap().logits);
                })
            });
        }
    }
    group.finish();
}

fn train(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    for name in [MethodName::SeqFt, MethodName::IncLora, MethodName::AmLora] {
        let spec = MethodSpec::new(name);
        let tasks = if name == MethodName::SeqFt { 1 } else { 4 };
        let mut m = model_with_tasks(&spec, tasks);
        let (b, labels) = batch(&m, 8);
        let mut opt = OptimizerState::adam(1e-3).unwrap();
        group.bench_function(name.as_str(), |bench| {
            bench.iter(|| black_box(train_step(&mut m, &spec, &mut opt, &b, &labels, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train);
criterion_main!(benches);
