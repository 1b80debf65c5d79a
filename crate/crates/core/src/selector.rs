//! The attentional selector.
//!
//! Every stack entry `i` has a score vector `W_ri` of length `d_out`. For an
//! input row, `logit_i = ⟨W_ri, Δw_i·x⟩`; the gates are the softmax of the
//! logits across entries, and the site output is
//! `h = W0·x + Σ_i g_i·(Δw_i·x)`. The zero adapter's logit is always 0.

use std::fmt;
use std::str::FromStr;

use crate::adapters::AdapterStack;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparsity weight used when none is configured.
pub const DEFAULT_LAMBDA: f64 = 1e-5;

/// Which score heads train during a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectorVariant {
    /// Only the new task's head.
    Nr,
    /// All heads.
    Ar,
}

impl fmt::Display for SelectorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectorVariant::Nr => "NR",
            SelectorVariant::Ar => "AR",
        })
    }
}

impl FromStr for SelectorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NR" => Ok(SelectorVariant::Nr),
            "AR" => Ok(SelectorVariant::Ar),
            other => Err(Error::Config(format!("variant must be NR or AR, got {other}"))),
        }
    }
}

/// Per-row gates over stack entries, `rows×(n+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector(pub Tensor);

impl GateVector {
    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Mean gate per entry over all rows.
    pub fn column_means(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.width());
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, g) in m.iter_mut().zip(self.row(i)) {
                *acc += g;
            }
        }
        m.iter_mut().for_each(|v| *v /= r as f64);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionalSelector {
    prefix: String,
    d_out: usize,
    heads: Vec<ParamId>,
    variant: SelectorVariant,
    lambda: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

impl AttentionalSelector {
    /// `stack_len` zero-initialized heads, so the initial gates are uniform.
    pub fn new(
        store: &mut ParamStore,
        prefix: impl Into<String>,
        stack_len: usize,
        d_out: usize,
        variant: SelectorVariant,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if stack_len == 0 {
            return Err(Error::Config("selector needs at least the zero adapter".into()));
        }
        let mut sel = AttentionalSelector {
            prefix: prefix.into(),
            d_out,
            heads: Vec::with_capacity(stack_len),
            variant,
            lambda,
        };
        for _ in 0..stack_len {
            sel.push_head(store)?;
        }
        Ok(sel)
    }

    /// Wrap heads already present in the store (checkpoint restore).
    pub fn from_heads(
        prefix: impl Into<String>,
        d_out: usize,
        heads: Vec<ParamId>,
        variant: SelectorVariant,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(AttentionalSelector {
            prefix: prefix.into(),
            d_out,
            heads,
            variant,
            lambda,
        })
    }

    fn push_head(&mut self, store: &mut ParamStore) -> Result<()> {
        let name = format!("{}.head{}", self.prefix, self.heads.len());
        let id = store.add(name, Tensor::zeros(&[self.d_out, 1]), false)?;
        self.heads.push(id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[ParamId] {
        &self.heads
    }

    pub fn variant(&self) -> SelectorVariant {
        self.variant
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.heads.len() * self.d_out
    }

    /// Append one zero head after the stack grew by one.
    pub fn extend_for_task(&mut self, store: &mut ParamStore, stack: &AdapterStack) -> Result<()> {
        if stack.len() != self.heads.len() + 1 {
            return Err(Error::State(format!(
                "{}: extend_for_task with {} heads for a stack of {}",
                self.prefix,
                self.heads.len(),
                stack.len()
            )));
        }
        self.push_head(store)
    }

    /// Gates for the stack outputs of `rows` input rows.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, rows: usize, outputs: &[Option<Var>]) -> Result<Var> {
        if outputs.len() != self.heads.len() {
            return Err(Error::State(format!(
                "{}: stale selector with {} heads for {} adapter outputs",
                self.prefix,
                self.heads.len(),
                outputs.len()
            )));
        }
        let heads: Vec<Var> = self.heads.iter().map(|&h| g.param(store, h)).collect();
        gate_from_heads(g, &heads, outputs, rows)
    }

    /// `λ · Σᵢ ‖W_ri‖₁`.
    pub fn sparsity_loss(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &h in &self.heads {
            let hv = g.param(store, h);
            let l = g.l1_norm(hv)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::State("selector has no heads".into()))?;
        g.scale(total, self.lambda)
    }

    /// Parameters that train for the active task. The zero adapter never
    /// contributes parameters.
    pub fn trainable_set(&self, stack: &AdapterStack) -> Result<Vec<ParamId>> {
        if !stack.is_training() {
            return Err(Error::State(format!("{}: no active task", self.prefix)));
        }
        if stack.len() != self.heads.len() {
            return Err(Error::State(format!(
                "{}: selector has {} heads for a stack of {}",
                self.prefix,
                self.heads.len(),
                stack.len()
            )));
        }
        let mut ids = stack.trainable_params();
        match self.variant {
            SelectorVariant::Ar => ids.extend_from_slice(&self.heads),
            SelectorVariant::Nr => ids.push(*self.heads.last().expect("non-empty")),
        }
        Ok(ids)
    }

    /// Adapter part of the gated forward: `(Σᵢ gᵢ·(Δwᵢ·x), gates)`, or `None`
    /// for the adapter sum when only the zero adapter exists.
    pub fn mix(&self, g: &mut Graph, store: &ParamStore, stack: &AdapterStack, x: Var) -> Result<(Option<Var>, Var)> {
        let rows = g.shape(x)[0];
        let outputs = stack.outputs(g, store, x)?;
        let gates = self.gate(g, store, rows, &outputs)?;
        let mut total: Option<Var> = None;
        for (i, out) in outputs.iter().enumerate() {
            let Some(out) = *out else { continue };
            let gi = g.slice_cols(gates, i, 1)?;
            let weighted = g.mul_column(out, gi)?;
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        Ok((total, gates))
    }
}

/// Softmax across entries of `logit_i = outputs[i] · heads[i]`. A `None`
/// output is the zero adapter and contributes a constant 0 logit.
pub fn gate_from_heads(g: &mut Graph, heads: &[Var], outputs: &[Option<Var>], rows: usize) -> Result<Var> {
    if heads.len() != outputs.len() {
        return Err(Error::State(format!(
            "{} heads for {} adapter outputs",
            heads.len(),
            outputs.len()
        )));
    }
    let mut logits = Vec::with_capacity(heads.len());
    for (&h, out) in heads.iter().zip(outputs) {
        let logit = match *out {
            Some(o) => {
                if g.shape(o)[0] != rows {
                    return Err(Error::dim("gate", g.shape(o), &[rows]));
                }
                g.matmul(o, h)?
            }
            None => g.constant(Tensor::zeros(&[rows, 1]))?,
        };
        logits.push(logit);
    }
    let stacked = g.concat_cols(&logits)?;
    g.softmax(stacked)
}

/// `h = x·W0ᵀ + Σᵢ gᵢ·(Δwᵢ·x)` for a bias-free site.
pub fn mixed_forward(
    g: &mut Graph,
    store: &ParamStore,
    w0: Var,
    stack: &AdapterStack,
    selector: &AttentionalSelector,
    x: Var,
) -> Result<(Var, GateVector)> {
    let base = g.matmul_nt(x, w0)?;
    let (mix, gates) = selector.mix(g, store, stack, x)?;
    let h = match mix {
        Some(m) => g.add(base, m)?,
        None => base,
    };
    let gv = GateVector(g.value(gates).clone());
    Ok((h, gv))
}
