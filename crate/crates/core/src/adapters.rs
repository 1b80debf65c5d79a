//! Task-specific LoRA sequences.
//!
//! Each task owns one low-rank pair `(B, A)` whose update is `(α/r)·B·A`.
//! Index 0 of a stack is the zero adapter. It has no buffers and can never be
//! trained.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, rng_for};
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 32.0;
pub const INIT_STD: f64 = 0.02;

/// One task's low-rank pair: `A` is `r×d_in`, `B` is `d_out×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub task_id: usize,
    pub d_in: usize,
    pub d_out: usize,
    frozen: bool,
}

pub(crate) fn check_rank(d_out: usize, d_in: usize, rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    if 2 * rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "adapter rank {rank} too large for a {d_out}x{d_in} weight (max {})",
            d_in.min(d_out) / 2
        )));
    }
    Ok(())
}

impl LoraAdapter {
    /// Register a fresh adapter under `prefix`: `A ~ N(0, 0.02²)`, `B = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        task_id: usize,
        seed: u64,
    ) -> Result<Self> {
        check_rank(d_out, d_in, rank)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("adapter alpha must be positive, got {alpha}")));
        }
        let a_name = format!("{prefix}.lora{task_id}.A");
        let mut rng = rng_for(seed, &a_name);
        let a = Tensor::new(vec![rank, d_in], gaussian_vec(&mut rng, rank * d_in, INIT_STD))?;
        let a = store.add(a_name, a, true)?;
        let b = store.add(format!("{prefix}.lora{task_id}.B"), Tensor::zeros(&[d_out, rank]), true)?;
        Ok(LoraAdapter {
            a,
            b,
            rank,
            alpha,
            task_id,
            d_in,
            d_out,
            frozen: false,
        })
    }

    /// Rebuild an adapter around tensors already in the store.
    pub fn from_params(store: &ParamStore, a: ParamId, b: ParamId, alpha: f64, task_id: usize) -> Result<Self> {
        let (rank, d_in) = store.get(a).dims2()?;
        let (d_out, rank_b) = store.get(b).dims2()?;
        if rank != rank_b {
            return Err(Error::dim("lora", store.get(a).shape(), store.get(b).shape()));
        }
        check_rank(d_out, d_in, rank)?;
        Ok(LoraAdapter {
            a,
            b,
            rank,
            alpha,
            task_id,
            d_in,
            d_out,
            frozen: true,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }

    pub fn num_params(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    pub fn freeze(&mut self, store: &mut ParamStore) {
        self.frozen = true;
        store.set_trainable(self.a, false);
        store.set_trainable(self.b, false);
    }

    /// `(α/r)·B·(A·x)` for row-major inputs `x` (`b×d_in`), low rank first.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let low = g.matmul_nt(x, a)?;
        let up = g.matmul_nt(low, b)?;
        g.scale(up, self.scale())
    }

    /// Eager form of [`LoraAdapter::apply`].
    pub fn apply_to(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone())?;
        let out = self.apply(&mut g, store, xv)?;
        Ok(g.value(out).clone())
    }

    /// Materialized `ΔW = (α/r)·B·A`, `d_out×d_in`.
    pub fn delta_weight(&self, store: &ParamStore) -> Result<Tensor> {
        Ok(store.get(self.b).matmul(store.get(self.a))?.scale(self.scale()))
    }
}

/// Ordered adapters `[Δw_0 (zero), Δw_1, …, Δw_n]` for one weight site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    prefix: String,
    d_out: usize,
    d_in: usize,
    loras: Vec<LoraAdapter>,
    training: bool,
}

impl AdapterStack {
    /// A stack holding only the zero adapter.
    pub fn new(prefix: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        AdapterStack {
            prefix: prefix.into(),
            d_out,
            d_in,
            loras: Vec::new(),
            training: false,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Number of entries including the zero adapter.
    pub fn len(&self) -> usize {
        self.loras.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the newest adapter; 0 when only the zero adapter exists.
    pub fn current_task(&self) -> usize {
        self.loras.len()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Adapter at stack index `i` (`i ≥ 1`). Index 0 is the zero adapter.
    pub fn adapter(&self, i: usize) -> Option<&LoraAdapter> {
        i.checked_sub(1).and_then(|j| self.loras.get(j))
    }

    /// The non-zero adapters, in task order.
    pub fn loras(&self) -> &[LoraAdapter] {
        &self.loras
    }

    /// Freeze every existing adapter and append a trainable one.
    pub fn begin_task(&mut self, store: &mut ParamStore, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        if self.training {
            return Err(Error::State(format!(
                "{}: begin_task while task {} is still training",
                self.prefix,
                self.current_task()
            )));
        }
        let task_id = self.loras.len() + 1;
        let adapter = LoraAdapter::new(store, &self.prefix, self.d_out, self.d_in, rank, alpha, task_id, seed)?;
        for lora in &mut self.loras {
            lora.freeze(store);
        }
        self.loras.push(adapter);
        self.training = true;
        Ok(())
    }

    pub fn end_task(&mut self) {
        self.training = false;
    }

    /// Append an already-registered adapter (checkpoint restore).
    pub fn push_restored(&mut self, adapter: LoraAdapter) -> Result<()> {
        if adapter.d_in != self.d_in || adapter.d_out != self.d_out {
            return Err(Error::dim("push_restored", &[self.d_out, self.d_in], &[adapter.d_out, adapter.d_in]));
        }
        self.loras.push(adapter);
        Ok(())
    }

    /// Parameters of the adapter currently in training, if any.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        match (self.training, self.loras.last()) {
            (true, Some(l)) => l.params().to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.loras.iter().flat_map(LoraAdapter::params).collect()
    }

    /// Parameters of all frozen adapters.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        self.loras
            .iter()
            .filter(|l| l.is_frozen())
            .flat_map(LoraAdapter::params)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.loras.iter().map(LoraAdapter::num_params).sum()
    }

    /// Outputs of every stack entry for input rows `x`; `None` marks the zero adapter.
    pub fn outputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Option<Var>>> {
        let mut outs = Vec::with_capacity(self.len());
        outs.push(None);
        for lora in &self.loras {
            outs.push(Some(lora.apply(g, store, x)?));
        }
        Ok(outs)
    }

    /// `W0 + Σᵢ (α/r)·Bᵢ·Aᵢ`.
    pub fn merged_weight(&self, store: &ParamStore, w0: &Tensor) -> Result<Tensor> {
        if w0.shape() != [self.d_out, self.d_in] {
            return Err(Error::dim("merged_weight", w0.shape(), &[self.d_out, self.d_in]));
        }
        let mut w = w0.clone();
        for lora in &self.loras {
            w = w.add(&lora.delta_weight(store)?)?;
        }
        Ok(w)
    }
}
