//! Desk-scale classifier backbones.
//!
//! Every projection is an [`AdaptedLinear`]; those whose [`Site`] is listed in
//! the config carry an adapter stack and, for the gated rule, a selector.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::adapters::{check_rank, AdapterStack};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, rng_for, Rng};
use crate::selector::{AttentionalSelector, SelectorVariant};
use crate::tensor::Tensor;

pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Transformer,
    Mlp,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Transformer => "transformer",
            BackboneKind::Mlp => "mlp",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(BackboneKind::Transformer),
            "mlp" => Ok(BackboneKind::Mlp),
            other => Err(Error::Config(format!("unknown backbone {other}"))),
        }
    }
}

/// Named linear projection an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Query,
    Key,
    Value,
    Output,
    Ffn,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Query, Site::Key, Site::Value, Site::Output, Site::Ffn];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Query => "query",
            Site::Key => "key",
            Site::Value => "value",
            Site::Output => "output",
            Site::Ffn => "ffn",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter site {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub adapter_sites: BTreeSet<Site>,
    /// Hidden width of the transformer feed-forward block, as a multiple of `embed_dim`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Transformer,
            vocab_size: 128,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            seq_len: 16,
            num_classes: 4,
            dropout_rate: 0.1,
            adapter_sites: [Site::Query, Site::Value].into_iter().collect(),
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab_size),
            ("d", self.embed_dim),
            ("layers", self.num_layers),
            ("heads", self.num_heads),
            ("seq_len", self.seq_len),
            ("classes", self.num_classes),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.backbone == BackboneKind::Mlp {
            if let Some(s) = self.adapter_sites.iter().find(|s| **s != Site::Ffn) {
                return Err(Error::Config(format!("site {s} does not exist on the mlp backbone")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::Transformer => self.embed_dim * self.ffn_mult,
            BackboneKind::Mlp => self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How adapter outputs combine at every adapted site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterRule {
    /// Adapters ignored.
    None,
    /// Exactly one adapter, added ungated.
    Single,
    /// Every adapter added ungated.
    Sum,
    /// Selector-gated mixture.
    Gated,
}

/// Model input.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `batch` sequences of `seq_len` token ids, flattened row-major.
    Tokens { ids: Vec<usize>, batch: usize },
    /// Dense `b×d` feature rows (mlp backbone only).
    Features(Tensor),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Tokens { batch, .. } => *batch,
            Batch::Features(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Base projection `x·Wᵀ + b` plus its adapter machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub name: String,
    pub layer: usize,
    pub site: Option<Site>,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub stack: Option<AdapterStack>,
    pub selector: Option<AttentionalSelector>,
}

/// Gates produced at one site during a traced forward.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub layer: usize,
    pub site: Site,
    pub gates: Var,
}

struct Ctx<'a> {
    mode: Mode,
    dropout: f64,
    rng: Option<&'a mut Rng>,
    rule: AdapterRule,
    gates: Option<Vec<GateRecord>>,
}

impl AdaptedLinear {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: String, layer: usize, site: Option<Site>, adapted: bool, d_out: usize, d_in: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &name);
        let w = Tensor::new(vec![d_out, d_in], gaussian_vec(&mut rng, d_out * d_in, WEIGHT_INIT_STD))?;
        let weight = store.add(format!("{name}.weight"), w, false)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]), false)?;
        Ok(AdaptedLinear {
            stack: adapted.then(|| AdapterStack::new(name.clone(), d_out, d_in)),
            name,
            layer,
            site,
            weight,
            bias,
            d_in,
            d_out,
            selector: None,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let lin = g.matmul_nt(x, w)?;
        let mut base = g.add_tiled(lin, b)?;
        if ctx.mode == Mode::Train && ctx.dropout > 0.0 {
            if let Some(rng) = ctx.rng.as_deref_mut() {
                let keep = 1.0 - ctx.dropout;
                let shape = g.shape(base).to_vec();
                let n = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = g.constant(Tensor::new(shape, mask)?)?;
                base = g.mul(base, mask)?;
            }
        }
        let Some(stack) = &self.stack else {
            return Ok(base);
        };
        let delta = match ctx.rule {
            AdapterRule::None => None,
            AdapterRule::Single | AdapterRule::Sum => {
                if ctx.rule == AdapterRule::Single && stack.loras().len() != 1 {
                    return Err(Error::Config(format!(
                        "{}: single-adapter rule with {} adapters",
                        self.name,
                        stack.loras().len()
                    )));
                }
                let mut total: Option<Var> = None;
                for out in stack.outputs(g, store, x)?.into_iter().flatten() {
                    total = Some(match total {
                        Some(t) => g.add(t, out)?,
                        None => out,
                    });
                }
                total
            }
            AdapterRule::Gated => {
                let sel = self
                    .selector
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("{}: gated rule without a selector", self.name)))?;
                let (mix, gates) = sel.mix(g, store, stack, x)?;
                if let (Some(records), Some(site)) = (ctx.gates.as_mut(), self.site) {
                    records.push(GateRecord {
                        layer: self.layer,
                        site,
                        gates,
                    });
                }
                mix
            }
        };
        match delta {
            Some(d) => g.add(base, d),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, d], 1.0), false)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d]), false)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Transformer {
        norm1: Norm,
        query: AdaptedLinear,
        key: AdaptedLinear,
        value: AdaptedLinear,
        output: AdaptedLinear,
        norm2: Norm,
        ffn: AdaptedLinear,
        ffn_down: AdaptedLinear,
    },
    Mlp {
        ffn: AdaptedLinear,
    },
}

impl Block {
    fn linears(&self) -> Vec<&AdaptedLinear> {
        match self {
            Block::Transformer {
                query,
                key,
                value,
                output,
                ffn,
                ffn_down,
                ..
            } => vec![query, key, value, output, ffn, ffn_down],
            Block::Mlp { ffn } => vec![ffn],
        }
    }

    fn linears_mut(&mut self) -> Vec<&mut AdaptedLinear> {
        match self {
            Block::Transformer {
                query,
                key,
                value,
                output,
                ffn,
                ffn_down,
                ..
            } => vec![query, key, value, output, ffn, ffn_down],
            Block::Mlp { ffn } => vec![ffn],
        }
    }
}

/// A backbone together with the store that owns all of its tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    embedding: ParamId,
    positions: Option<ParamId>,
    blocks: Vec<Block>,
    final_norm: Option<Norm>,
    head: AdaptedLinear,
    rule: AdapterRule,
}

/// Output of [`Model::forward`].
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub gates: Vec<GateRecord>,
}

/// Deterministically initialize a backbone: Gaussian(0, 0.02) weights, zero
/// biases, unit norm gains, empty adapter stacks.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let d = config.embed_dim;
    let mut rng = rng_for(seed, "embed.tokens");
    let emb = Tensor::new(
        vec![config.vocab_size, d],
        gaussian_vec(&mut rng, config.vocab_size * d, WEIGHT_INIT_STD),
    )?;
    let embedding = store.add("embed.tokens", emb, false)?;
    let sites = &config.adapter_sites;
    let mut blocks = Vec::with_capacity(config.num_layers);
    let (positions, final_norm) = match config.backbone {
        BackboneKind::Transformer => {
            let mut rng = rng_for(seed, "embed.positions");
            let pos = Tensor::new(
                vec![config.seq_len, d],
                gaussian_vec(&mut rng, config.seq_len * d, WEIGHT_INIT_STD),
            )?;
            let positions = store.add("embed.positions", pos, false)?;
            let hidden = config.ffn_dim();
            for l in 0..config.num_layers {
                let lin = |site: Site, d_out: usize, d_in: usize, store: &mut ParamStore| {
                    AdaptedLinear::new(store, format!("layer{l}.{site}"), l, Some(site), sites.contains(&site), d_out, d_in, seed)
                };
                let norm1 = Norm::new(&mut store, &format!("layer{l}.norm1"), d)?;
                let query = lin(Site::Query, d, d, &mut store)?;
                let key = lin(Site::Key, d, d, &mut store)?;
                let value = lin(Site::Value, d, d, &mut store)?;
                let output = lin(Site::Output, d, d, &mut store)?;
                let norm2 = Norm::new(&mut store, &format!("layer{l}.norm2"), d)?;
                let ffn = lin(Site::Ffn, hidden, d, &mut store)?;
                let ffn_down = AdaptedLinear::new(&mut store, format!("layer{l}.ffn_down"), l, None, false, d, hidden, seed)?;
                blocks.push(Block::Transformer {
                    norm1,
                    query,
                    key,
                    value,
                    output,
                    norm2,
                    ffn,
                    ffn_down,
                });
            }
            (Some(positions), Some(Norm::new(&mut store, "final_norm", d)?))
        }
        BackboneKind::Mlp => {
            for l in 0..config.num_layers {
                let ffn = AdaptedLinear::new(&mut store, format!("layer{l}.ffn"), l, Some(Site::Ffn), sites.contains(&Site::Ffn), d, d, seed)?;
                blocks.push(Block::Mlp { ffn });
            }
            (None, None)
        }
    };
    let head = AdaptedLinear::new(&mut store, "head".into(), config.num_layers, None, false, config.num_classes, d, seed)?;
    Ok(Model {
        config: config.clone(),
        store,
        embedding,
        positions,
        blocks,
        final_norm,
        head,
        rule: AdapterRule::None,
    })
}

impl Model {
    pub fn rule(&self) -> AdapterRule {
        self.rule
    }

    pub fn set_rule(&mut self, rule: AdapterRule) {
        self.rule = rule;
    }

    /// Adapted sites in layer order.
    pub fn sites(&self) -> Vec<&AdaptedLinear> {
        self.blocks
            .iter()
            .flat_map(Block::linears)
            .filter(|l| l.stack.is_some())
            .collect()
    }

    pub fn sites_mut(&mut self) -> Vec<&mut AdaptedLinear> {
        self.blocks
            .iter_mut()
            .flat_map(Block::linears_mut)
            .filter(|l| l.stack.is_some())
            .collect()
    }

    /// Look up a site by layer and kind.
    pub fn site(&self, layer: usize, site: Site) -> Option<&AdaptedLinear> {
        self.sites().into_iter().find(|l| l.layer == layer && l.site == Some(site))
    }

    /// `(layer, site)` pairs of the adapter registry.
    pub fn registry(&self) -> Vec<(usize, Site)> {
        self.sites()
            .iter()
            .map(|l| (l.layer, l.site.expect("adapted linears carry a site")))
            .collect()
    }

    /// Every parameter that belongs to the backbone itself.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.positions);
        for block in &self.blocks {
            if let Block::Transformer { norm1, norm2, .. } = block {
                ids.extend(norm1.params());
                ids.extend(norm2.params());
            }
            for lin in block.linears() {
                ids.push(lin.weight);
                ids.push(lin.bias);
            }
        }
        if let Some(n) = &self.final_norm {
            ids.extend(n.params());
        }
        ids.push(self.head.weight);
        ids.push(self.head.bias);
        ids
    }

    pub fn base_param_count(&self) -> usize {
        self.base_params().iter().map(|&id| self.store.get(id).numel()).sum()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.sites().iter().filter_map(|s| s.stack.as_ref()).map(AdapterStack::param_count).sum()
    }

    pub fn selector_param_count(&self) -> usize {
        self.sites().iter().filter_map(|s| s.selector.as_ref()).map(AttentionalSelector::param_count).sum()
    }

    /// Number of adapters per site (all sites advance together).
    pub fn num_tasks(&self) -> usize {
        self.sites()
            .first()
            .and_then(|s| s.stack.as_ref())
            .map_or(0, AdapterStack::current_task)
    }

    pub fn begin_task(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let sites = self.sites();
        if sites.is_empty() {
            return Err(Error::Config("no adapter sites configured".into()));
        }
        for s in &sites {
            check_rank(s.d_out, s.d_in, rank)?;
        }
        let mut store = std::mem::take(&mut self.store);
        let result = (|| {
            for s in self.sites_mut() {
                s.stack.as_mut().expect("adapted").begin_task(&mut store, rank, alpha, seed)?;
            }
            Ok(())
        })();
        self.store = store;
        result
    }

    pub fn end_task(&mut self) {
        for s in self.sites_mut() {
            if let Some(st) = s.stack.as_mut() {
                st.end_task();
            }
        }
    }

    /// Give every adapted site a selector sized to its current stack.
    pub fn attach_selectors(&mut self, variant: SelectorVariant, lambda: f64) -> Result<()> {
        let mut store = std::mem::take(&mut self.store);
        let result = (|| {
            for s in self.sites_mut() {
                let stack = s.stack.as_ref().expect("adapted");
                let sel = AttentionalSelector::new(&mut store, format!("{}.selector", s.name), stack.len(), s.d_out, variant, lambda)?;
                s.selector = Some(sel);
            }
            Ok(())
        })();
        self.store = store;
        result
    }

    pub fn extend_selectors(&mut self) -> Result<()> {
        let mut store = std::mem::take(&mut self.store);
        let result = (|| {
            for s in self.sites_mut() {
                let stack = s.stack.as_ref().expect("adapted");
                let sel = s
                    .selector
                    .as_mut()
                    .ok_or_else(|| Error::State(format!("{}: no selector attached", s.name)))?;
                sel.extend_for_task(&mut store, stack)?;
            }
            Ok(())
        })();
        self.store = store;
        result
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        for s in self.sites_mut() {
            if let Some(sel) = s.selector.as_mut() {
                sel.set_lambda(lambda)?;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        match batch {
            Batch::Tokens { ids, batch } => {
                if *batch == 0 || ids.len() != batch * self.config.seq_len {
                    return Err(Error::dim("batch", &[ids.len()], &[*batch, self.config.seq_len]));
                }
                if let Some(bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
                    return Err(Error::Validation(format!(
                        "token {bad} is outside the vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                Ok(())
            }
            Batch::Features(t) => {
                if self.config.backbone != BackboneKind::Mlp {
                    return Err(Error::Validation("feature input needs the mlp backbone".into()));
                }
                let (_, d) = t.dims2()?;
                if d != self.config.embed_dim {
                    return Err(Error::dim("features", t.shape(), &[self.config.embed_dim]));
                }
                Ok(())
            }
        }
    }

    /// Logits `b×C`. `rng` drives dropout in train mode; without it no
    /// dropout is applied. Gate records are collected when `record_gates`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mode: Mode, rng: Option<&mut Rng>, record_gates: bool) -> Result<ForwardOutput> {
        self.forward_with_rule(g, batch, mode, rng, record_gates, self.rule)
    }

    /// [`Model::forward`] under an explicit combination rule.
    pub fn forward_with_rule(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        rng: Option<&mut Rng>,
        record_gates: bool,
        rule: AdapterRule,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let store = &self.store;
        let mut ctx = Ctx {
            mode,
            dropout: self.config.dropout_rate,
            rng,
            rule,
            gates: record_gates.then(Vec::new),
        };
        let seq = self.config.seq_len;
        let mut x = match batch {
            Batch::Tokens { ids, .. } => {
                let table = g.param(store, self.embedding);
                let tokens = g.gather_rows(table, ids)?;
                match self.positions {
                    Some(p) => {
                        let pv = g.param(store, p);
                        g.add_tiled(tokens, pv)?
                    }
                    None => g.mean_pool(tokens, seq)?,
                }
            }
            Batch::Features(t) => g.constant(t.clone())?,
        };
        let n_seq = batch.len();
        for block in &self.blocks {
            match block {
                Block::Transformer {
                    norm1,
                    query,
                    key,
                    value,
                    output,
                    norm2,
                    ffn,
                    ffn_down,
                } => {
                    let h = norm1.forward(g, store, x)?;
                    let q = query.forward(g, store, h, &mut ctx)?;
                    let k = key.forward(g, store, h, &mut ctx)?;
                    let v = value.forward(g, store, h, &mut ctx)?;
                    let att = g.attention(q, k, v, n_seq, seq, self.config.num_heads)?;
                    let o = output.forward(g, store, att, &mut ctx)?;
                    x = g.add(x, o)?;
                    let h = norm2.forward(g, store, x)?;
                    let up = ffn.forward(g, store, h, &mut ctx)?;
                    let up = g.relu(up)?;
                    let down = ffn_down.forward(g, store, up, &mut ctx)?;
                    x = g.add(x, down)?;
                }
                Block::Mlp { ffn } => {
                    let h = ffn.forward(g, store, x, &mut ctx)?;
                    let h = g.relu(h)?;
                    x = g.add(x, h)?;
                }
            }
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, store, x)?;
        }
        if self.positions.is_some() {
            x = g.mean_pool(x, seq)?;
        }
        let logits = self.head.forward(g, store, x, &mut ctx)?;
        Ok(ForwardOutput {
            logits,
            gates: ctx.gates.unwrap_or_default(),
        })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, batch, Mode::Eval, None, false)?;
        Ok(g.value(out.logits).clone())
    }
}
