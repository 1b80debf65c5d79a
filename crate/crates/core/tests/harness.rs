use std::collections::{BTreeMap, HashSet};

use amlora_core::autodiff::{OptimizerKind, ParamStore};
use amlora_core::baselines::{finish_task, prepare_task, MethodName, MethodSpec};
use amlora_core::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use amlora_core::harness::report::{metrics_csv, summary_csv};
use amlora_core::harness::tasks::{signature_tokens, Generator, Inputs};
use amlora_core::harness::{
    emit_report, evaluate, generate_task, run_stream, train_task, ExperimentConfig, TaskData, TaskSpec, TrainConfig,
};
use amlora_core::model::{build_model, Batch};
use amlora_core::{Error, Tensor};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "d=16",
        "layers=1",
        "heads=2",
        "seq_len=8",
        "vocab=64",
        "tasks=3",
        "classes=2",
        "train_per_task=64",
        "eval_per_task=32",
        "signatures_per_class=2",
        "r=4",
        "alpha=8",
        "lr=0.003",
    ])
    .unwrap();
    cfg
}

fn train_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        learning_rate: lr,
        batch_size: 8,
        optimizer: OptimizerKind::Adam,
    }
}

fn bytes(store: &ParamStore) -> BTreeMap<String, Vec<u8>> {
    store.iter().map(|(_, n, t)| (n.to_string(), t.to_le_bytes())).collect()
}

/// Bag-of-words logistic regression trained by plain gradient descent.
fn linear_probe_accuracy(task: &TaskData, vocab: usize) -> f64 {
    let counts = |ids: &[usize]| {
        let mut v = vec![0.0; vocab];
        ids.iter().for_each(|&t| v[t] += 1.0 / ids.len() as f64);
        v
    };
    let (Inputs::Tokens { ids: train, .. }, Inputs::Tokens { ids: eval, .. }) = (&task.train.inputs, &task.eval.inputs) else {
        panic!("token task expected")
    };
    let c = task.spec.num_classes;
    let mut w = vec![vec![0.0; vocab]; c];
    for _ in 0..200 {
        for (seq, &y) in train.iter().zip(&task.train.labels) {
            let x = counts(seq);
            let logits: Vec<f64> = w.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for k in 0..c {
                let p = (logits[k] - m).exp() / z;
                let g = p - if k == y { 1.0 } else { 0.0 };
                w[k].iter_mut().zip(&x).for_each(|(a, b)| *a -= 0.5 * g * b);
            }
        }
    }
    let correct = eval
        .iter()
        .zip(&task.eval.labels)
        .filter(|(seq, &y)| {
            let x = counts(seq);
            let scores: Vec<f64> = w.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            let best = (0..c).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
            best == y
        })
        .count();
    correct as f64 / eval.len() as f64
}

#[test]
fn pure_signature_tasks_are_linearly_separable() {
    let spec = TaskSpec {
        task_id: 1,
        num_classes: 4,
        train_per_class: 50,
        eval_per_class: 25,
        generator: Generator::TokenSignature {
            p_sig: 1.0,
            signatures_per_class: 4,
            vocab_size: 128,
            seq_len: 16,
            slots: 4,
        },
        seed: 9,
    };
    let task = generate_task(&spec).unwrap();
    assert_eq!(linear_probe_accuracy(&task, 128), 1.0);
}

#[test]
fn default_tasks_share_background_only() {
    let cfg = ExperimentConfig::default();
    let tasks: Vec<TaskData> = cfg.task_specs(0).unwrap().iter().map(|s| generate_task(s).unwrap()).collect();
    let token_sets: Vec<HashSet<usize>> = tasks
        .iter()
        .map(|t| match &t.train.inputs {
            Inputs::Tokens { ids, .. } => ids.iter().flatten().copied().filter(|&x| x >= 64).collect(),
            Inputs::Features(_) => unreachable!(),
        })
        .collect();
    for (i, a) in token_sets.iter().enumerate() {
        for b in &token_sets[i + 1..] {
            assert!(a.is_disjoint(b));
        }
    }
    assert_eq!(signature_tokens(128, 4, 4, 4, 0, 0), 64..68);
    assert_eq!(tasks[0].train.len(), 1000);
    assert_eq!(tasks[0].eval.len(), 400);
}

#[test]
fn fresh_model_is_near_chance() {
    // A random backbone is not an independent coin per example, so the
    // binomial bound is pinned per task for seed 0 and on the mean elsewhere.
    let cfg = ExperimentConfig::default();
    let mut all = Vec::new();
    for seed in 0..6 {
        let model = build_model(&cfg.model_config(), seed).unwrap();
        for spec in cfg.task_specs(seed).unwrap() {
            let acc = evaluate(&model, &generate_task(&spec).unwrap().eval).unwrap();
            if seed == 0 {
                assert!((0.15..=0.35).contains(&acc), "task {}: {acc}", spec.task_id);
            }
            all.push(acc);
        }
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((0.2..=0.3).contains(&mean), "{mean}");
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = tiny();
    let model = build_model(&cfg.model_config(), 1).unwrap();
    let task = generate_task(&cfg.task_specs(1).unwrap()[0]).unwrap();
    assert_eq!(evaluate(&model, &task.eval).unwrap(), evaluate(&model, &task.eval).unwrap());
}

#[test]
fn first_step_loss_is_log_classes() {
    let cfg = ExperimentConfig::default();
    let task = generate_task(&cfg.task_specs(0).unwrap()[0]).unwrap();
    for name in [MethodName::SeqFt, MethodName::IncLora, MethodName::AmLora] {
        let method = cfg.method_spec(name);
        let mut model = build_model(&cfg.model_config(), 0).unwrap();
        prepare_task(&mut model, &method, 0, cfg.adapter_hyper(), 0).unwrap();
        let log = train_task(&mut model, &method, &task.train, &cfg.train_config(), 0, "t").unwrap();
        assert!((log.losses[0] - 4f64.ln()).abs() < 0.1, "{name}: {}", log.losses[0]);
        assert_eq!(log.steps(), 125);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = tiny();
    let task = generate_task(&cfg.task_specs(0).unwrap()[0]).unwrap();
    for name in [MethodName::SeqFt, MethodName::AmLora] {
        let method = cfg.method_spec(name);
        let mut model = build_model(&cfg.model_config(), 0).unwrap();
        prepare_task(&mut model, &method, 0, cfg.adapter_hyper(), 0).unwrap();
        let before = bytes(&model.store);
        let acc = evaluate(&model, &task.eval).unwrap();
        train_task(&mut model, &method, &task.train, &train_cfg(0.0), 0, "t").unwrap();
        assert_eq!(bytes(&model.store), before);
        assert_eq!(evaluate(&model, &task.eval).unwrap(), acc);
    }
}

#[test]
fn training_touches_exactly_the_trainable_set() {
    let cfg = tiny();
    let specs = cfg.task_specs(0).unwrap();
    for name in [MethodName::SinLora, MethodName::IncLora, MethodName::AmLora] {
        let method = cfg.method_spec(name);
        let mut model = build_model(&cfg.model_config(), 0).unwrap();
        for (pos, spec) in specs.iter().enumerate() {
            let task = generate_task(spec).unwrap();
            prepare_task(&mut model, &method, pos, cfg.adapter_hyper(), 0).unwrap();
            let trainable: HashSet<String> =
                model.store.trainable_ids().iter().map(|&id| model.store.name(id).to_string()).collect();
            let before = bytes(&model.store);
            train_task(&mut model, &method, &task.train, &cfg.train_config(), 0, "t").unwrap();
            for (name_, b) in bytes(&model.store) {
                if !trainable.contains(&name_) && before.contains_key(&name_) {
                    assert_eq!(before[&name_], b, "{name}: {name_} changed while frozen");
                }
            }
            finish_task(&mut model, &method);
        }
    }
}

#[test]
fn non_finite_loss_reports_step() {
    let cfg = tiny();
    let task = generate_task(&cfg.task_specs(0).unwrap()[0]).unwrap();
    let method = cfg.method_spec(MethodName::SeqFt);
    let mut model = build_model(&cfg.model_config(), 0).unwrap();
    prepare_task(&mut model, &method, 0, cfg.adapter_hyper(), 0).unwrap();
    let id = model.store.id("head.bias").unwrap();
    model.store.assign(id, &Tensor::filled(&[1, 2], f64::NAN)).unwrap();
    match train_task(&mut model, &method, &task.train, &cfg.train_config(), 0, "t") {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 0"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn one_task_stream() {
    let mut cfg = tiny();
    cfg.tasks = 1;
    let stream = cfg.stream(1, 0).unwrap();
    let r = run_stream(&stream, &cfg.method_spec(MethodName::AmLora), &cfg, 0).unwrap();
    assert_eq!(r.acc.len(), 1);
    assert_eq!(r.acc[0].len(), 1);
    assert_eq!(r.forgetting(), vec![0.0]);
}

#[test]
fn mtl_on_one_task_equals_seqft() {
    let mut cfg = tiny();
    cfg.tasks = 1;
    let stream = cfg.stream(1, 4).unwrap();
    let a = run_stream(&stream, &cfg.method_spec(MethodName::Mtl), &cfg, 4).unwrap();
    let b = run_stream(&stream, &cfg.method_spec(MethodName::SeqFt), &cfg, 4).unwrap();
    assert_eq!(a.acc, b.acc);
}

#[test]
fn per_task_ft_never_forgets() {
    let cfg = tiny();
    let r = run_stream(&cfg.stream(1, 0).unwrap(), &cfg.method_spec(MethodName::PerTaskFt), &cfg, 0).unwrap();
    assert!(r.forgetting().iter().all(|&f| f == 0.0));
    assert_eq!(r.mean_forgetting(), 0.0);
}

#[test]
fn mtl_rows_repeat_the_final_evaluation() {
    let cfg = tiny();
    let r = run_stream(&cfg.stream(1, 0).unwrap(), &cfg.method_spec(MethodName::Mtl), &cfg, 0).unwrap();
    let last = r.acc.last().unwrap();
    for (t, row) in r.acc.iter().enumerate() {
        assert_eq!(&row[..], &last[..=t]);
    }
}

#[test]
fn every_method_reports_the_same_schema() {
    let cfg = tiny();
    let stream = cfg.stream(2, 3).unwrap();
    let reports: Vec<_> = MethodName::ALL
        .iter()
        .map(|&m| run_stream(&stream, &cfg.method_spec(m), &cfg, 3).unwrap())
        .collect();
    for r in &reports {
        assert_eq!(r.acc.len(), 3);
        assert_eq!(r.trainable_params.len(), 3);
        assert_eq!(r.order_id, "2");
    }
    let text = String::from_utf8(metrics_csv(&reports).unwrap()).unwrap();
    assert_eq!(text.lines().count(), 1 + 6 * 6);
}

#[test]
fn amlora_overhead_line() {
    let cfg = tiny();
    let stream = cfg.stream(1, 0).unwrap();
    let inc = run_stream(&stream, &cfg.method_spec(MethodName::IncLora), &cfg, 0).unwrap();
    let am = run_stream(&stream, &cfg.method_spec(MethodName::AmLora), &cfg, 0).unwrap();
    let model = build_model(&cfg.model_config(), 0).unwrap();
    let sites = model.sites().len();
    for t in 0..3 {
        assert_eq!(am.trainable_params[t], inc.trainable_params[t] + sites * (t + 2) * cfg.d);
    }
    assert_eq!(am.selector_params, sites * 4 * cfg.d);
    assert_eq!(am.adapter_params, inc.adapter_params);
}

#[test]
fn identical_runs_give_identical_csv() {
    let cfg = tiny();
    let run = || {
        let stream = cfg.stream(1, 2).unwrap();
        let r = run_stream(&stream, &cfg.method_spec(MethodName::AmLora), &cfg, 2).unwrap();
        (metrics_csv(std::slice::from_ref(&r)).unwrap(), summary_csv(&[r]).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn csv_aggregates_independently() {
    let cfg = tiny();
    let stream = cfg.stream(1, 0).unwrap();
    let reports: Vec<_> = [MethodName::SeqFt, MethodName::AmLora]
        .iter()
        .map(|&m| run_stream(&stream, &cfg.method_spec(m), &cfg, 0).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&reports, &cfg.render(), dir.path()).unwrap();

    // Final row average per (method, seed) from metrics.csv alone.
    let mut rdr = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let mut last: BTreeMap<(String, String), (usize, Vec<f64>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let key = (rec[0].to_string(), rec[1].to_string());
        let after: usize = rec[3].parse().unwrap();
        let acc: f64 = rec[5].parse().unwrap();
        let e = last.entry(key).or_insert((0, Vec::new()));
        if after > e.0 {
            *e = (after, Vec::new());
        }
        if after == e.0 {
            e.1.push(acc);
        }
    }
    let mut rdr = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (_, accs) = &last[&(rec[0].to_string(), rec[1].to_string())];
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        let reported: f64 = rec[2].parse().unwrap();
        assert!((avg - reported).abs() <= 1e-9);
        seen += 1;
    }
    assert_eq!(seen, 2);
    assert_eq!(std::fs::read_to_string(dir.path().join("config.txt")).unwrap(), cfg.render());
}

fn trained_amlora(cfg: &ExperimentConfig, tasks: usize) -> amlora_core::Model {
    let method = cfg.method_spec(MethodName::AmLora);
    let mut model = build_model(&cfg.model_config(), 5).unwrap();
    for (pos, spec) in cfg.task_specs(5).unwrap().iter().take(tasks).enumerate() {
        prepare_task(&mut model, &method, pos, cfg.adapter_hyper(), 5).unwrap();
        train_task(&mut model, &method, &generate_task(spec).unwrap().train, &cfg.train_config(), 5, "t").unwrap();
        finish_task(&mut model, &method);
    }
    model
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny();
    let model = trained_amlora(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let batch = Batch::Tokens {
        ids: (0..4 * cfg.seq_len).map(|i| (i * 13) % cfg.vocab).collect(),
        batch: 4,
    };
    let (a, b) = (model.logits(&batch).unwrap(), back.logits(&batch).unwrap());
    assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    assert_eq!(back.num_tasks(), 3);
    assert_eq!(Checkpoint::from_model(&back), Checkpoint::from_model(&model));
}

#[test]
fn checkpoint_record_counts() {
    let cfg = tiny();
    let model = trained_amlora(&cfg, 2);
    let ck = Checkpoint::from_model(&model);
    let adapters = ck.adapter_records();
    let heads = ck.head_records();
    assert_eq!(adapters.len(), model.sites().len());
    for site in model.sites() {
        assert_eq!(adapters[&site.name], 2);
        assert_eq!(heads[&site.name], 3);
    }
}

#[test]
fn checkpoint_rejects_damage() {
    let cfg = tiny();
    let bytes = Checkpoint::from_model(&trained_amlora(&cfg, 1)).to_bytes();
    for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut future = bytes.clone();
    let pos = future.iter().position(|&b| b == b'\n').unwrap();
    future[pos - 1] = b'7';
    assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::Version { .. })));
    let mut garbage = bytes;
    garbage[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&garbage), Err(Error::Format(_))));
}

#[test]
fn checkpoint_of_plain_and_inclora_models() {
    let cfg = tiny();
    for name in [MethodName::SeqFt, MethodName::IncLora] {
        let method = MethodSpec::new(name);
        let mut model = build_model(&cfg.model_config(), 1).unwrap();
        for pos in 0..2 {
            if name == MethodName::SeqFt && pos > 0 {
                break;
            }
            prepare_task(&mut model, &method, pos, cfg.adapter_hyper(), 1).unwrap();
            finish_task(&mut model, &method);
        }
        let back = Checkpoint::from_bytes(&Checkpoint::from_model(&model).to_bytes()).unwrap().into_model().unwrap();
        assert_eq!(back.rule(), model.rule());
        assert_eq!(bytes(&back.store), bytes(&model.store));
    }
}
