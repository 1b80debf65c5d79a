//! Flat `key=value` experiment configuration.
//!
//! Unknown keys are errors. `method`, `order` and `seed` take comma lists
//! and span the run grid; every other key holds one value.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{OptimizerKind, DEFAULT_LEARNING_RATE};
use crate::adapters::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::baselines::{AdapterHyper, MethodName, MethodSpec};
use crate::error::{Error, Result};
use crate::harness::tasks::{
    builtin_order, Generator, TaskSpec, TaskStream, DEFAULT_EVAL_PER_CLASS, DEFAULT_P_SIG, DEFAULT_SIGNATURES_PER_CLASS,
    DEFAULT_TRAIN_PER_CLASS,
};
use crate::harness::train::{TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
use crate::model::{BackboneKind, ModelConfig, Site};
use crate::selector::{SelectorVariant, DEFAULT_LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    TokenSignature,
    RotatedGaussian,
}

/// Everything needed to reproduce a grid of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub backbone: BackboneKind,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub sites: BTreeSet<Site>,
    pub tasks: usize,
    pub classes: usize,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    pub generator: GeneratorKind,
    pub p_sig: f64,
    pub signatures_per_class: usize,
    pub noise: f64,
    pub rotation: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub r: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_per_task: Option<Vec<f64>>,
    pub variant: SelectorVariant,
    pub method: Vec<MethodName>,
    pub order: Vec<u32>,
    pub seed: Vec<u64>,
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "backbone",
    "d",
    "layers",
    "heads",
    "seq_len",
    "vocab",
    "ffn_mult",
    "dropout",
    "sites",
    "tasks",
    "classes",
    "train_per_task",
    "eval_per_task",
    "generator",
    "p_sig",
    "signatures_per_class",
    "noise",
    "rotation",
    "epochs",
    "lr",
    "batch",
    "optimizer",
    "r",
    "alpha",
    "lambda",
    "lambda_per_task",
    "variant",
    "method",
    "order",
    "seed",
];

/// Default number of seeds for grid runs.
pub const DEFAULT_SEEDS: u64 = 5;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ExperimentConfig {
            backbone: m.backbone,
            d: m.embed_dim,
            layers: m.num_layers,
            heads: m.num_heads,
            seq_len: m.seq_len,
            vocab: m.vocab_size,
            ffn_mult: m.ffn_mult,
            dropout: m.dropout_rate,
            sites: m.adapter_sites,
            tasks: 4,
            classes: m.num_classes,
            train_per_task: DEFAULT_TRAIN_PER_CLASS * m.num_classes,
            eval_per_task: DEFAULT_EVAL_PER_CLASS * m.num_classes,
            generator: GeneratorKind::TokenSignature,
            p_sig: DEFAULT_P_SIG,
            signatures_per_class: DEFAULT_SIGNATURES_PER_CLASS,
            noise: 1.0,
            rotation: std::f64::consts::FRAC_PI_4,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LEARNING_RATE,
            batch: DEFAULT_BATCH_SIZE,
            optimizer: OptimizerKind::Adam,
            r: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            lambda_per_task: None,
            variant: SelectorVariant::Ar,
            method: vec![MethodName::AmLora],
            order: vec![1],
            seed: (0..DEFAULT_SEEDS).collect(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides in order, then validate.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Set one key. The error names the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone" => self.backbone = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "sites" => self.sites = parse_list::<Site>(key, value)?.into_iter().collect(),
            "tasks" => self.tasks = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "train_per_task" => self.train_per_task = parse(key, value)?,
            "eval_per_task" => self.eval_per_task = parse(key, value)?,
            "generator" => {
                self.generator = match value {
                    "token_signature" => GeneratorKind::TokenSignature,
                    "rotated_gaussian" => GeneratorKind::RotatedGaussian,
                    other => return Err(Error::Config(format!("generator: unknown generator {other:?}"))),
                }
            }
            "p_sig" => self.p_sig = parse(key, value)?,
            "signatures_per_class" => self.signatures_per_class = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "rotation" => self.rotation = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(Error::Config(format!("optimizer: unknown optimizer {other:?}"))),
                }
            }
            "r" => self.r = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lambda_per_task" => {
                self.lambda_per_task = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "variant" => self.variant = parse(key, value)?,
            "method" => self.method = parse_list(key, value)?,
            "order" => self.order = parse_list(key, value)?,
            "seed" => self.seed = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.tasks == 0 {
            return bad("tasks", "must be at least 1");
        }
        if self.classes < 2 {
            return bad("classes", "must be at least 2");
        }
        if self.train_per_task == 0 || !self.train_per_task.is_multiple_of(self.classes) {
            return bad("train_per_task", "must be a positive multiple of classes");
        }
        if self.eval_per_task == 0 || !self.eval_per_task.is_multiple_of(self.classes) {
            return bad("eval_per_task", "must be a positive multiple of classes");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and non-negative");
        }
        if let Some(l) = &self.lambda_per_task {
            if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad("lambda_per_task", "entries must be finite and non-negative");
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if self.r == 0 {
            return bad("r", "must be at least 1");
        }
        if self.generator == GeneratorKind::RotatedGaussian && self.backbone != BackboneKind::Mlp {
            return bad("generator", "rotated_gaussian needs backbone=mlp");
        }
        for &o in &self.order {
            builtin_order(o, self.tasks).map_err(|e| Error::Config(format!("order: {e}")))?;
        }
        self.model_config().validate()?;
        for t in self.task_specs(0)? {
            t.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            vocab_size: self.vocab,
            embed_dim: self.d,
            num_layers: self.layers,
            num_heads: self.heads,
            seq_len: self.seq_len,
            num_classes: self.classes,
            dropout_rate: self.dropout,
            adapter_sites: self.sites.clone(),
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch,
            optimizer: self.optimizer,
        }
    }

    pub fn adapter_hyper(&self) -> AdapterHyper {
        AdapterHyper {
            rank: self.r,
            alpha: self.alpha,
        }
    }

    /// Options for a method in this config.
    pub fn method_spec(&self, name: MethodName) -> MethodSpec {
        MethodSpec {
            name,
            variant: self.variant,
            lambda: self.lambda,
            lambda_per_task: self.lambda_per_task.clone(),
        }
    }

    /// Task specs by slot, with data drawn from `seed`.
    pub fn task_specs(&self, seed: u64) -> Result<Vec<TaskSpec>> {
        let generator = match self.generator {
            GeneratorKind::TokenSignature => Generator::TokenSignature {
                p_sig: self.p_sig,
                signatures_per_class: self.signatures_per_class,
                vocab_size: self.vocab,
                seq_len: self.seq_len,
                slots: self.tasks,
            },
            GeneratorKind::RotatedGaussian => Generator::RotatedGaussian {
                dim: self.d,
                radius: 2.0,
                noise: self.noise,
                rotation: self.rotation,
            },
        };
        Ok((0..self.tasks)
            .map(|task_id| TaskSpec {
                task_id,
                num_classes: self.classes,
                train_per_class: self.train_per_task / self.classes,
                eval_per_class: self.eval_per_task / self.classes,
                generator: generator.clone(),
                seed,
            })
            .collect())
    }

    /// Task stream for a built-in order.
    pub fn stream(&self, order: u32, seed: u64) -> Result<TaskStream> {
        let specs = self.task_specs(seed)?;
        let perm = builtin_order(order, self.tasks)?;
        TaskStream::new(order.to_string(), perm.into_iter().map(|i| specs[i].clone()).collect())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "backbone" => match self.backbone {
                BackboneKind::Transformer => "transformer".into(),
                BackboneKind::Mlp => "mlp".into(),
            },
            "d" => self.d.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "vocab" => self.vocab.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "dropout" => self.dropout.to_string(),
            "sites" => self.sites.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            "tasks" => self.tasks.to_string(),
            "classes" => self.classes.to_string(),
            "train_per_task" => self.train_per_task.to_string(),
            "eval_per_task" => self.eval_per_task.to_string(),
            "generator" => match self.generator {
                GeneratorKind::TokenSignature => "token_signature".into(),
                GeneratorKind::RotatedGaussian => "rotated_gaussian".into(),
            },
            "p_sig" => self.p_sig.to_string(),
            "signatures_per_class" => self.signatures_per_class.to_string(),
            "noise" => self.noise.to_string(),
            "rotation" => self.rotation.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "r" => self.r.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda" => self.lambda.to_string(),
            "lambda_per_task" => self.lambda_per_task.as_deref().map_or_else(|| "none".into(), join),
            "variant" => self.variant.to_string(),
            "method" => join(&self.method),
            "order" => join(&self.order),
            "seed" => join(&self.seed),
            _ => unreachable!("key list and renderer disagree"),
        }
    }

    /// Canonical text: every key in fixed order. Parses back to `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value(key));
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}
