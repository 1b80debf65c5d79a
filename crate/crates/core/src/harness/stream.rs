//! Sequential-task driver shared by every method.

use std::time::Instant;

use crate::baselines::{finish_task, prepare_task, MethodName, MethodSpec};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::MetricsReport;
use crate::harness::tasks::{generate_task, Dataset, TaskData, TaskStream};
use crate::harness::train::{evaluate, train_task};
use crate::model::{build_model, Model};

/// Outcome of a run: whatever rows completed, plus the error that stopped
/// the run early, if any.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: Option<Model>,
    pub error: Option<Error>,
}

impl RunOutcome {
    pub fn into_result(self) -> Result<MetricsReport> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.report),
        }
    }
}

fn stream_key(pos: usize) -> String {
    format!("task{pos}")
}

/// Byte snapshots of every frozen adapter buffer.
fn frozen_snapshot(model: &Model) -> Vec<(String, Vec<u8>)> {
    model
        .sites()
        .iter()
        .flat_map(|s| s.stack.as_ref().expect("adapted").frozen_params())
        .map(|id| (model.store.name(id).to_string(), model.store.get(id).to_le_bytes()))
        .collect()
}

fn check_frozen(model: &Model, before: &[(String, Vec<u8>)]) -> Result<()> {
    for (name, bytes) in before {
        let id = model.store.id(name).expect("snapshot names exist");
        if &model.store.get(id).to_le_bytes() != bytes {
            return Err(Error::State(format!("frozen adapter {name} changed during training")));
        }
    }
    Ok(())
}

/// Run `method` over `stream`. Never panics on training failures: the
/// returned outcome carries completed rows and the error.
pub fn run_stream_outcome(stream: &TaskStream, method: &MethodSpec, cfg: &ExperimentConfig, seed: u64) -> RunOutcome {
    let mut report = MetricsReport::new(method.label(), seed, stream.order_id.clone(), cfg.digest());
    let tasks: Result<Vec<TaskData>> = stream.tasks.iter().map(generate_task).collect();
    let tasks = match tasks {
        Ok(t) => t,
        Err(e) => {
            return RunOutcome {
                report,
                model: None,
                error: Some(e),
            }
        }
    };
    report.task_ids = stream.tasks.iter().map(|t| t.task_id).collect();
    let result = match method.name {
        MethodName::PerTaskFt => per_task_ft(&tasks, method, cfg, seed, &mut report).map(|()| None),
        MethodName::Mtl => mtl(&tasks, method, cfg, seed, &mut report).map(Some),
        _ => sequential(&tasks, method, cfg, seed, &mut report).map(Some),
    };
    match result {
        Ok(model) => RunOutcome {
            report,
            model,
            error: None,
        },
        Err(e) => RunOutcome {
            report,
            model: None,
            error: Some(e),
        },
    }
}

/// [`run_stream_outcome`] as a `Result`.
pub fn run_stream(stream: &TaskStream, method: &MethodSpec, cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    run_stream_outcome(stream, method, cfg, seed).into_result()
}

fn sequential(tasks: &[TaskData], method: &MethodSpec, cfg: &ExperimentConfig, seed: u64, report: &mut MetricsReport) -> Result<Model> {
    let mut model = build_model(&cfg.model_config(), seed)?;
    report.base_params = model.base_param_count();
    for (pos, task) in tasks.iter().enumerate() {
        let start = Instant::now();
        prepare_task(&mut model, method, pos, cfg.adapter_hyper(), seed)?;
        let trainable = model.store.trainable_count();
        let frozen = frozen_snapshot(&model);
        train_task(&mut model, method, &task.train, &cfg.train_config(), seed, &stream_key(pos))?;
        check_frozen(&model, &frozen)?;
        finish_task(&mut model, method);
        let row = tasks[..=pos].iter().map(|t| evaluate(&model, &t.eval)).collect::<Result<Vec<_>>>()?;
        report.push_row(row, trainable, start.elapsed().as_secs_f64())?;
        report.adapter_params = model.adapter_param_count();
        report.selector_params = model.selector_param_count();
    }
    Ok(model)
}

/// One freshly initialized model per task; each row reports every
/// dedicated model on its own task.
fn per_task_ft(tasks: &[TaskData], method: &MethodSpec, cfg: &ExperimentConfig, seed: u64, report: &mut MetricsReport) -> Result<()> {
    let mut own = Vec::with_capacity(tasks.len());
    for (pos, task) in tasks.iter().enumerate() {
        let start = Instant::now();
        let mut model = build_model(&cfg.model_config(), seed)?;
        report.base_params = model.base_param_count();
        prepare_task(&mut model, method, 0, cfg.adapter_hyper(), seed)?;
        let trainable = model.store.trainable_count();
        train_task(&mut model, method, &task.train, &cfg.train_config(), seed, &stream_key(pos))?;
        finish_task(&mut model, method);
        own.push(evaluate(&model, &task.eval)?);
        report.push_row(own.clone(), trainable, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

/// One model trained on the shuffled union of every task for as many steps
/// as the sequential methods take in total. Every row repeats the final
/// evaluation.
fn mtl(tasks: &[TaskData], method: &MethodSpec, cfg: &ExperimentConfig, seed: u64, report: &mut MetricsReport) -> Result<Model> {
    let start = Instant::now();
    let mut model = build_model(&cfg.model_config(), seed)?;
    report.base_params = model.base_param_count();
    prepare_task(&mut model, method, 0, cfg.adapter_hyper(), seed)?;
    let trainable = model.store.trainable_count();
    let parts: Vec<&Dataset> = tasks.iter().map(|t| &t.train).collect();
    let union = Dataset::concat(&parts)?;
    train_task(&mut model, method, &union, &cfg.train_config(), seed, &stream_key(0))?;
    finish_task(&mut model, method);
    let finals = tasks.iter().map(|t| evaluate(&model, &t.eval)).collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64();
    for pos in 0..tasks.len() {
        report.push_row(finals[..=pos].to_vec(), trainable, if pos + 1 == tasks.len() { secs } else { 0.0 })?;
    }
    Ok(model)
}
