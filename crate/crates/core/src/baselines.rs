//! Continual-learning methods compared against the gated adapter mixture.
//!
//! Every method shares the stream driver in [`crate::harness`]; a method only
//! decides which parameters train during a task and how adapter outputs
//! combine in the forward pass.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, OptimizerState, ParamId, Var};
use crate::error::{Error, Result};
use crate::model::{AdapterRule, Batch, Mode, Model};
use crate::rng::Rng;
use crate::selector::{SelectorVariant, DEFAULT_LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodName {
    SeqFt,
    SinLora,
    IncLora,
    PerTaskFt,
    Mtl,
    AmLora,
}

impl MethodName {
    pub const ALL: [MethodName; 6] = [
        MethodName::SeqFt,
        MethodName::SinLora,
        MethodName::IncLora,
        MethodName::PerTaskFt,
        MethodName::Mtl,
        MethodName::AmLora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::SeqFt => "seqft",
            MethodName::SinLora => "sinlora",
            MethodName::IncLora => "inclora",
            MethodName::PerTaskFt => "pertaskft",
            MethodName::Mtl => "mtl",
            MethodName::AmLora => "amlora",
        }
    }

    /// Methods that fine-tune the backbone instead of adapters.
    pub fn is_full_finetune(self) -> bool {
        matches!(self, MethodName::SeqFt | MethodName::PerTaskFt | MethodName::Mtl)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// A method plus its options.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub name: MethodName,
    /// Selector variant (amlora only).
    pub variant: SelectorVariant,
    /// Sparsity weight (amlora only).
    pub lambda: f64,
    /// Per-task sparsity weights by stream position; overrides `lambda`.
    pub lambda_per_task: Option<Vec<f64>>,
}

impl MethodSpec {
    pub fn new(name: MethodName) -> Self {
        MethodSpec {
            name,
            variant: SelectorVariant::Ar,
            lambda: DEFAULT_LAMBDA,
            lambda_per_task: None,
        }
    }

    pub fn amlora(variant: SelectorVariant, lambda: f64) -> Self {
        MethodSpec {
            variant,
            lambda,
            ..MethodSpec::new(MethodName::AmLora)
        }
    }

    /// Sparsity weight in effect for the task at stream position `pos`.
    pub fn lambda_at(&self, pos: usize) -> f64 {
        self.lambda_per_task
            .as_ref()
            .and_then(|l| l.get(pos).copied())
            .unwrap_or(self.lambda)
    }

    /// Label used in report rows. Non-default amlora options are spelled out.
    pub fn label(&self) -> String {
        if self.name != MethodName::AmLora {
            return self.name.to_string();
        }
        let mut label = String::from("amlora");
        if self.variant != SelectorVariant::Ar {
            label.push_str(&format!("-{}", self.variant));
        }
        if self.lambda != DEFAULT_LAMBDA || self.lambda_per_task.is_some() {
            match &self.lambda_per_task {
                Some(l) => {
                    let parts: Vec<String> = l.iter().map(f64::to_string).collect();
                    label.push_str(&format!("-l1={}", parts.join("/")));
                }
                None => label.push_str(&format!("-l1={}", self.lambda)),
            }
        }
        label
    }

    pub fn forward_rule(&self) -> AdapterRule {
        match self.name {
            MethodName::SeqFt | MethodName::PerTaskFt | MethodName::Mtl => AdapterRule::None,
            MethodName::SinLora => AdapterRule::Single,
            MethodName::IncLora => AdapterRule::Sum,
            MethodName::AmLora => AdapterRule::Gated,
        }
    }
}

/// Adapter hyperparameters used when a method opens a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterHyper {
    pub rank: usize,
    pub alpha: f64,
}

/// Put `model` in the state required to train the task at stream position
/// `pos`: open adapters and selectors as the method needs, set the forward
/// rule and mark exactly the method's parameters trainable.
pub fn prepare_task(model: &mut Model, method: &MethodSpec, pos: usize, hyper: AdapterHyper, seed: u64) -> Result<()> {
    let adapter_seed = crate::rng::sub_seed(seed, pos as u64);
    match method.name {
        MethodName::SeqFt | MethodName::PerTaskFt | MethodName::Mtl => {
            if model.num_tasks() > 0 {
                return Err(Error::Config(format!("{} expects a model without adapters", method.name)));
            }
        }
        MethodName::SinLora => {
            if pos == 0 {
                model.begin_task(hyper.rank, hyper.alpha, adapter_seed)?;
            } else if model.num_tasks() != 1 {
                return Err(Error::Config(format!("sinlora expects one adapter, found {}", model.num_tasks())));
            }
        }
        MethodName::IncLora => model.begin_task(hyper.rank, hyper.alpha, adapter_seed)?,
        MethodName::AmLora => {
            model.begin_task(hyper.rank, hyper.alpha, adapter_seed)?;
            if model.sites().iter().all(|s| s.selector.is_none()) {
                model.attach_selectors(method.variant, method.lambda_at(pos))?;
            } else {
                model.extend_selectors()?;
                model.set_lambda(method.lambda_at(pos))?;
            }
        }
    }
    model.set_rule(method.forward_rule());
    let ids = trainable_set(model, method)?;
    model.store.set_trainable_exactly(&ids);
    Ok(())
}

/// Close the active task: adapter methods freeze what they trained. The
/// single shared adapter of sinlora stays open.
pub fn finish_task(model: &mut Model, method: &MethodSpec) {
    if matches!(method.name, MethodName::IncLora | MethodName::AmLora) {
        model.end_task();
    }
    model.store.set_trainable_exactly(&[]);
}

/// Parameters a method trains during the active task.
pub fn trainable_set(model: &Model, method: &MethodSpec) -> Result<Vec<ParamId>> {
    match method.name {
        MethodName::SeqFt | MethodName::PerTaskFt | MethodName::Mtl => Ok(model.base_params()),
        MethodName::SinLora | MethodName::IncLora => Ok(model
            .sites()
            .iter()
            .flat_map(|s| s.stack.as_ref().expect("adapted").trainable_params())
            .collect()),
        MethodName::AmLora => {
            let mut ids = Vec::new();
            for s in model.sites() {
                let sel = s
                    .selector
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("{}: no selector attached", s.name)))?;
                ids.extend(sel.trainable_set(s.stack.as_ref().expect("adapted"))?);
            }
            Ok(ids)
        }
    }
}

/// Training objective of `method` on one batch: cross-entropy, plus the
/// selector sparsity terms for amlora.
pub fn loss(model: &Model, method: &MethodSpec, g: &mut Graph, batch: &Batch, labels: &[usize], rng: Option<&mut Rng>) -> Result<Var> {
    let out = model.forward_with_rule(g, batch, Mode::Train, rng, false, method.forward_rule())?;
    let mut total = g.cross_entropy(out.logits, labels)?;
    if method.name == MethodName::AmLora {
        for s in model.sites() {
            if let Some(sel) = &s.selector {
                let l1 = sel.sparsity_loss(g, &model.store)?;
                total = g.add(total, l1)?;
            }
        }
    }
    Ok(total)
}

/// One optimizer step of the objective; returns the loss value.
pub fn train_step(
    model: &mut Model,
    method: &MethodSpec,
    opt: &mut OptimizerState,
    batch: &Batch,
    labels: &[usize],
    rng: Option<&mut Rng>,
) -> Result<f64> {
    let mut g = Graph::new();
    let l = loss(model, method, &mut g, batch, labels, rng)?;
    let value = g.value(l).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    g.backward(l, &mut model.store)?;
    opt.step(&mut model.store)?;
    Ok(value)
}

/// Full fine-tuning step: every base parameter trains, adapters are ignored.
pub fn seqft_step(model: &mut Model, opt: &mut OptimizerState, batch: &Batch, labels: &[usize], rng: Option<&mut Rng>) -> Result<f64> {
    if model.num_tasks() > 0 {
        return Err(Error::Config("seqft expects a model without adapters".into()));
    }
    let method = MethodSpec::new(MethodName::SeqFt);
    model.set_rule(AdapterRule::None);
    let ids = model.base_params();
    model.store.set_trainable_exactly(&ids);
    train_step(model, &method, opt, batch, labels, rng)
}

/// Eval logits with the single shared adapter added ungated.
pub fn sinlora_forward(model: &Model, batch: &Batch) -> Result<crate::tensor::Tensor> {
    if model.num_tasks() != 1 {
        return Err(Error::Config(format!("sinlora expects exactly one adapter, found {}", model.num_tasks())));
    }
    eval_logits(model, batch, AdapterRule::Single)
}

/// Eval logits with every adapter added ungated.
pub fn inclora_forward(model: &Model, batch: &Batch) -> Result<crate::tensor::Tensor> {
    eval_logits(model, batch, AdapterRule::Sum)
}

fn eval_logits(model: &Model, batch: &Batch, rule: AdapterRule) -> Result<crate::tensor::Tensor> {
    let mut g = Graph::inference();
    let out = model.forward_with_rule(&mut g, batch, Mode::Eval, None, false, rule)?;
    Ok(g.value(out.logits).clone())
}
