//! Synthetic classification tasks.
//!
//! `token_signature`: the vocabulary is split into a shared background range
//! and disjoint signature ranges, one per (task slot, class). A sequence of
//! class `c` draws each position from that class's signatures with
//! probability `p_sig` and from the background otherwise.
//!
//! `rotated_gaussian`: class means sit on a circle in the first two feature
//! dimensions; each task slot rotates the circle.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{gaussian_vec, rng_for, sub_seed, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_P_SIG: f64 = 0.4;
pub const DEFAULT_SIGNATURES_PER_CLASS: usize = 4;
pub const DEFAULT_TRAIN_PER_CLASS: usize = 250;
pub const DEFAULT_EVAL_PER_CLASS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    TokenSignature {
        p_sig: f64,
        signatures_per_class: usize,
        vocab_size: usize,
        seq_len: usize,
        /// Number of task slots sharing the vocabulary.
        slots: usize,
    },
    RotatedGaussian {
        dim: usize,
        radius: f64,
        noise: f64,
        /// Rotation applied per task slot, in radians.
        rotation: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Slot of the task in the generator's layout; stable across orders.
    pub task_id: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub generator: Generator,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Tokens { seq_len: usize, ids: Vec<Vec<usize>> },
    Features(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Model batch for the examples at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Batch, Vec<usize>)> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let batch = match &self.inputs {
            Inputs::Tokens { ids, .. } => Batch::Tokens {
                ids: idx.iter().flat_map(|&i| ids[i].iter().copied()).collect(),
                batch: idx.len(),
            },
            Inputs::Features(rows) => {
                let d = rows.first().map_or(0, Vec::len);
                Batch::Features(Tensor::new(
                    vec![idx.len(), d],
                    idx.iter().flat_map(|&i| rows[i].iter().copied()).collect(),
                )?)
            }
        };
        Ok((batch, labels))
    }

    /// Hash of example `i` (input and label).
    pub fn example_hash(&self, i: usize) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        match &self.inputs {
            Inputs::Tokens { ids, .. } => ids[i].hash(&mut h),
            Inputs::Features(rows) => rows[i].iter().for_each(|v| v.to_bits().hash(&mut h)),
        }
        h.finish()
    }

    /// Concatenate datasets of the same input kind.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of no datasets".into()))?;
        let mut labels = Vec::new();
        let mut inputs = match &first.inputs {
            Inputs::Tokens { seq_len, .. } => Inputs::Tokens {
                seq_len: *seq_len,
                ids: Vec::new(),
            },
            Inputs::Features(_) => Inputs::Features(Vec::new()),
        };
        for p in parts {
            labels.extend_from_slice(&p.labels);
            match (&mut inputs, &p.inputs) {
                (Inputs::Tokens { ids, .. }, Inputs::Tokens { ids: more, .. }) => ids.extend(more.iter().cloned()),
                (Inputs::Features(rows), Inputs::Features(more)) => rows.extend(more.iter().cloned()),
                _ => return Err(Error::Validation("cannot mix token and feature datasets".into())),
            }
        }
        Ok(Dataset { inputs, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Token range owned by (slot, class) in a signature layout.
pub fn signature_tokens(vocab_size: usize, per_class: usize, slots: usize, classes: usize, slot: usize, class: usize) -> std::ops::Range<usize> {
    let background = vocab_size - slots * classes * per_class;
    let start = background + (slot * classes + class) * per_class;
    start..start + per_class
}

/// Number of tokens left for the shared background.
pub fn background_size(vocab_size: usize, per_class: usize, slots: usize, classes: usize) -> Option<usize> {
    vocab_size.checked_sub(slots * classes * per_class)
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return Err(Error::Config("train and eval splits must be non-empty".into()));
        }
        match &self.generator {
            Generator::TokenSignature {
                p_sig,
                signatures_per_class,
                vocab_size,
                seq_len,
                slots,
            } => {
                if !(0.0..=1.0).contains(p_sig) {
                    return Err(Error::Config(format!("p_sig {p_sig} outside [0, 1]")));
                }
                if *signatures_per_class == 0 || *seq_len == 0 {
                    return Err(Error::Config("signature count and sequence length must be positive".into()));
                }
                if self.task_id >= *slots {
                    return Err(Error::Config(format!("task slot {} outside {slots} slots", self.task_id)));
                }
                let needs_background = *p_sig < 1.0;
                match background_size(*vocab_size, *signatures_per_class, *slots, self.num_classes) {
                    Some(b) if b > 0 || !needs_background => Ok(()),
                    _ => Err(Error::Config(format!(
                        "{slots} tasks x {} classes x {signatures_per_class} signature tokens do not fit a vocabulary of {vocab_size}",
                        self.num_classes
                    ))),
                }
            }
            Generator::RotatedGaussian { dim, noise, .. } => {
                if *dim < 2 {
                    return Err(Error::Config("rotated_gaussian needs at least 2 dimensions".into()));
                }
                if noise.is_nan() || *noise < 0.0 {
                    return Err(Error::Config("noise must be non-negative".into()));
                }
                Ok(())
            }
        }
    }

    fn sample(&self, rng: &mut Rng, class: usize) -> Sample {
        match &self.generator {
            Generator::TokenSignature {
                p_sig,
                signatures_per_class,
                vocab_size,
                seq_len,
                slots,
            } => {
                let sig = signature_tokens(*vocab_size, *signatures_per_class, *slots, self.num_classes, self.task_id, class);
                let background = background_size(*vocab_size, *signatures_per_class, *slots, self.num_classes).unwrap_or(0);
                let ids = (0..*seq_len)
                    .map(|_| {
                        if background == 0 || rng.random::<f64>() < *p_sig {
                            rng.random_range(sig.clone())
                        } else {
                            rng.random_range(0..background)
                        }
                    })
                    .collect();
                Sample::Tokens(ids)
            }
            Generator::RotatedGaussian {
                dim,
                radius,
                noise,
                rotation,
            } => {
                let angle = 2.0 * PI * class as f64 / self.num_classes as f64 + rotation * self.task_id as f64;
                let mut x = gaussian_vec(rng, *dim, *noise);
                x[0] += radius * angle.cos();
                x[1] += radius * angle.sin();
                Sample::Features(x)
            }
        }
    }
}

enum Sample {
    Tokens(Vec<usize>),
    Features(Vec<f64>),
}

fn build_split(spec: &TaskSpec, per_class: usize, rng: &mut Rng, exclude: Option<&HashSet<u64>>) -> Result<Dataset> {
    let mut ds = match &spec.generator {
        Generator::TokenSignature { seq_len, .. } => Dataset {
            inputs: Inputs::Tokens {
                seq_len: *seq_len,
                ids: Vec::new(),
            },
            labels: Vec::new(),
        },
        Generator::RotatedGaussian { .. } => Dataset {
            inputs: Inputs::Features(Vec::new()),
            labels: Vec::new(),
        },
    };
    for class in 0..spec.num_classes {
        let mut made = 0;
        let mut attempts = 0;
        while made < per_class {
            attempts += 1;
            if attempts > per_class * 100 {
                return Err(Error::Config(format!(
                    "task {}: cannot draw {per_class} distinct examples for class {class}",
                    spec.task_id
                )));
            }
            match spec.sample(rng, class) {
                Sample::Tokens(ids) => {
                    let Inputs::Tokens { ids: all, .. } = &mut ds.inputs else { unreachable!() };
                    all.push(ids);
                }
                Sample::Features(x) => {
                    let Inputs::Features(all) = &mut ds.inputs else { unreachable!() };
                    all.push(x);
                }
            }
            ds.labels.push(class);
            let last = ds.len() - 1;
            if exclude.is_some_and(|ex| ex.contains(&ds.example_hash(last))) {
                ds.labels.pop();
                match &mut ds.inputs {
                    Inputs::Tokens { ids, .. } => {
                        ids.pop();
                    }
                    Inputs::Features(rows) => {
                        rows.pop();
                    }
                }
                continue;
            }
            made += 1;
        }
    }
    Ok(ds)
}

/// Generate the train and eval splits of a task. Pure in `spec`; eval never
/// repeats a training example.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut train_rng = rng_for(sub_seed(spec.seed, spec.task_id as u64), "train");
    let train = build_split(spec, spec.train_per_class, &mut train_rng, None)?;
    let seen: HashSet<u64> = (0..train.len()).map(|i| train.example_hash(i)).collect();
    let mut eval_rng = rng_for(sub_seed(spec.seed, spec.task_id as u64), "eval");
    let eval = build_split(spec, spec.eval_per_class, &mut eval_rng, Some(&seen))?;
    Ok(TaskData {
        spec: spec.clone(),
        train,
        eval,
    })
}

/// Ordered task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub order_id: String,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn new(order_id: impl Into<String>, tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Usage("a task stream needs at least one task".into()));
        }
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.task_id) {
                return Err(Error::Config(format!("task id {} appears twice in the stream", t.task_id)));
            }
        }
        Ok(TaskStream {
            order_id: order_id.into(),
            tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Built-in permutations of `n` task slots. For four tasks these follow the
/// shape of the standard benchmark orders: identity, last two swapped, and
/// `[2, 1, 3, 0]`.
pub fn builtin_order(order: u32, n: usize) -> Result<Vec<usize>> {
    let identity: Vec<usize> = (0..n).collect();
    match order {
        1 => Ok(identity),
        2 => {
            let mut p = identity;
            if n >= 2 {
                p.swap(n - 2, n - 1);
            }
            Ok(p)
        }
        3 if n == 4 => Ok(vec![2, 1, 3, 0]),
        3 => Ok(identity.into_iter().rev().collect()),
        other => Err(Error::Config(format!("unknown order {other}; built-in orders are 1, 2, 3"))),
    }
}

/// Shuffle `0..n` deterministically.
pub fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(slot: usize, p_sig: f64) -> TaskSpec {
        TaskSpec {
            task_id: slot,
            num_classes: 4,
            train_per_class: 50,
            eval_per_class: 20,
            generator: Generator::TokenSignature {
                p_sig,
                signatures_per_class: 4,
                vocab_size: 128,
                seq_len: 16,
                slots: 4,
            },
            seed: 5,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_task(&spec(1, 0.4)).unwrap(), generate_task(&spec(1, 0.4)).unwrap());
    }

    #[test]
    fn splits_disjoint() {
        let t = generate_task(&spec(2, 0.4)).unwrap();
        let train: HashSet<u64> = (0..t.train.len()).map(|i| t.train.example_hash(i)).collect();
        assert!((0..t.eval.len()).all(|i| !train.contains(&t.eval.example_hash(i))));
        assert_eq!(t.train.len(), 200);
        assert_eq!(t.eval.len(), 80);
    }

    #[test]
    fn signature_ranges_disjoint_across_tasks_and_classes() {
        let mut seen = HashSet::new();
        for slot in 0..4 {
            for class in 0..4 {
                for tok in signature_tokens(128, 4, 4, 4, slot, class) {
                    assert!((64..128).contains(&tok));
                    assert!(seen.insert(tok));
                }
            }
        }
    }

    #[test]
    fn tokens_come_from_own_signatures_or_background() {
        let t = generate_task(&spec(3, 0.4)).unwrap();
        let Inputs::Tokens { ids, .. } = &t.train.inputs else { panic!() };
        for (seq, &label) in ids.iter().zip(&t.train.labels) {
            let sig = signature_tokens(128, 4, 4, 4, 3, label);
            assert!(seq.iter().all(|tok| *tok < 64 || sig.contains(tok)));
        }
    }

    #[test]
    fn capacity_error() {
        let mut s = spec(0, 0.4);
        s.generator = Generator::TokenSignature {
            p_sig: 0.4,
            signatures_per_class: 8,
            vocab_size: 128,
            seq_len: 16,
            slots: 4,
        };
        assert!(matches!(generate_task(&s), Err(Error::Config(_))));
    }

    #[test]
    fn orders_are_permutations() {
        for o in 1..=3 {
            let mut p = builtin_order(o, 4).unwrap();
            p.sort_unstable();
            assert_eq!(p, vec![0, 1, 2, 3]);
        }
        assert_eq!(builtin_order(3, 4).unwrap(), vec![2, 1, 3, 0]);
        assert!(builtin_order(7, 4).is_err());
    }

    #[test]
    fn rotated_gaussian_shapes() {
        let s = TaskSpec {
            task_id: 1,
            num_classes: 3,
            train_per_class: 10,
            eval_per_class: 5,
            generator: Generator::RotatedGaussian {
                dim: 8,
                radius: 2.0,
                noise: 0.1,
                rotation: 0.3,
            },
            seed: 0,
        };
        let t = generate_task(&s).unwrap();
        let (batch, labels) = t.train.batch(&[0, 1, 29]).unwrap();
        assert_eq!(labels, vec![0, 0, 2]);
        match batch {
            Batch::Features(x) => assert_eq!(x.shape(), &[3, 8]),
            _ => panic!("expected features"),
        }
    }
}
