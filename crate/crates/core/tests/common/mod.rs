//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use amlora_core::autodiff::{finite_diff_check, GradCheckReport, DEFAULT_EPS};
use amlora_core::rng::{gaussian_vec, rng_for};
use amlora_core::{
    build_model, AdapterRule, AdapterStack, AttentionalSelector, Batch, Graph, Mode, Model, ModelConfig, ParamId, ParamStore,
    SelectorVariant, Tensor,
};
use rand::Rng;

pub fn rand_tensor(shape: &[usize], seed: u64, name: &str, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(&mut rng_for(seed, name), n, std)).unwrap()
}

/// One bias-free adapted site with `n` frozen adapters whose `B` factors are
/// random, and a selector over the stack.
pub struct SiteFixture {
    pub store: ParamStore,
    pub w0: ParamId,
    pub stack: AdapterStack,
    pub selector: AttentionalSelector,
}

impl SiteFixture {
    pub fn new(n: usize, d_out: usize, d_in: usize, seed: u64, head_std: f64) -> Self {
        let mut store = ParamStore::new();
        let w0 = store.add("w0", rand_tensor(&[d_out, d_in], seed, "w0", 1.0), false).unwrap();
        let mut stack = AdapterStack::new("site", d_out, d_in);
        for t in 0..n {
            stack.begin_task(&mut store, 2, 4.0, seed + t as u64).unwrap();
            let b = stack.adapter(t + 1).unwrap().params()[1];
            store.assign(b, &rand_tensor(&[d_out, 2], seed + t as u64, "B", 1.0)).unwrap();
            stack.end_task();
        }
        let mut selector = AttentionalSelector::new(&mut store, "site", n + 1, d_out, SelectorVariant::Ar, 0.0).unwrap();
        if head_std > 0.0 {
            for (i, &h) in selector.heads().to_vec().iter().enumerate() {
                store.assign(h, &rand_tensor(&[d_out, 1], seed + i as u64, "head", head_std)).unwrap();
            }
        }
        selector.set_lambda(0.0).unwrap();
        SiteFixture { store, w0, stack, selector }
    }

    /// Mixed output and gate rows for input rows `x`.
    pub fn mixed(&self, x: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::inference();
        let w0 = g.param(&self.store, self.w0);
        let xv = g.constant(x.clone()).unwrap();
        let (h, gates) = amlora_core::selector::mixed_forward(&mut g, &self.store, w0, &self.stack, &self.selector, xv).unwrap();
        (g.value(h).clone(), gates.0)
    }

    /// `x·W0ᵀ + (1/(n+1))·Σ adapter outputs`, computed eagerly.
    pub fn uniform_reference(&self, x: &Tensor) -> Tensor {
        let n1 = self.stack.len() as f64;
        let mut h = x.matmul(&self.store.get(self.w0).transpose().unwrap()).unwrap();
        for lora in self.stack.loras() {
            h = h.add(&lora.apply_to(&self.store, x).unwrap().scale(1.0 / n1)).unwrap();
        }
        h
    }
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        seq_len: 4,
        num_classes: 3,
        dropout_rate: 0.1,
        ..ModelConfig::default()
    }
}

pub fn toy_batch(cfg: &ModelConfig, b: usize) -> (Batch, Vec<usize>) {
    let mut rng = rng_for(42, "batch");
    let ids = (0..b * cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let labels = (0..b).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    (Batch::Tokens { ids, batch: b }, labels)
}

/// Two tasks of AM-LoRA with every adapter and head set to random values so
/// no gradient path is trivially zero.
pub fn two_task_amlora(cfg: &ModelConfig, lambda: f64) -> Model {
    let mut m = build_model(cfg, 7).unwrap();
    m.begin_task(2, 32.0, 1).unwrap();
    m.attach_selectors(SelectorVariant::Ar, lambda).unwrap();
    m.end_task();
    m.begin_task(2, 32.0, 2).unwrap();
    m.extend_selectors().unwrap();
    m.set_rule(AdapterRule::Gated);
    let mut rng = rng_for(3, "randomize");
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let name = m.store.name(id).to_string();
        if name.contains(".lora") || name.contains(".head") {
            let shape = m.store.get(id).shape().to_vec();
            let n = shape.iter().product();
            let t = Tensor::new(shape, gaussian_vec(&mut rng, n, 0.5)).unwrap();
            m.store.assign(id, &t).unwrap();
        }
    }
    m
}

/// Central differences over the trainable set of the full gated loss
/// (cross-entropy plus every selector's L1 term) on the toy model.
pub fn amlora_gradient_check(lambda: f64) -> GradCheckReport {
    let cfg = toy_config();
    let mut m = two_task_amlora(&cfg, lambda);
    let mut ids = Vec::new();
    for s in m.sites() {
        ids.extend(s.selector.as_ref().unwrap().trainable_set(s.stack.as_ref().unwrap()).unwrap());
    }
    m.store.set_trainable_exactly(&ids);
    let (batch, labels) = toy_batch(&cfg, 3);
    let model = m.clone();
    finite_diff_check(&mut m.store, DEFAULT_EPS, |g, store| {
        let mut view = model.clone();
        view.store = store.clone();
        let out = view.forward(g, &batch, Mode::Eval, None, false)?;
        let mut total = g.cross_entropy(out.logits, &labels)?;
        for s in view.sites() {
            let l1 = s.selector.as_ref().unwrap().sparsity_loss(g, store)?;
            total = g.add(total, l1)?;
        }
        Ok(total)
    })
    .unwrap()
}
