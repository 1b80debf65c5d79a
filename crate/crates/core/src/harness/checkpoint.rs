//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! AMLORA-CKPT 1\n
//! u64 header length, header text (key=value lines)
//! u64 record count
//! per record: u64 record length, u32 name length, name (UTF-8),
//!             u32 rank, rank × u64 dims, row-major f64 data
//! ```
//!
//! Adapter `{site}.lora{t}` is stored as three records: `.meta` holding
//! `[task_id, r, α]`, then `.A` and `.B`. Selector heads are stored under
//! their parameter names. Optimizer state is not saved.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::write_atomic;
use crate::model::{build_model, AdapterRule, Model, ModelConfig};
use crate::selector::{AttentionalSelector, SelectorVariant};
use crate::tensor::Tensor;

pub const MAGIC: &str = "AMLORA-CKPT";
pub const VERSION: u32 = 1;

const MODEL_KEYS: &[&str] = &["backbone", "d", "layers", "heads", "seq_len", "vocab", "ffn_mult", "dropout", "sites", "classes"];

/// A named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

fn rule_str(rule: AdapterRule) -> &'static str {
    match rule {
        AdapterRule::None => "none",
        AdapterRule::Single => "single",
        AdapterRule::Sum => "sum",
        AdapterRule::Gated => "gated",
    }
}

fn parse_rule(s: &str) -> Result<AdapterRule> {
    match s {
        "none" => Ok(AdapterRule::None),
        "single" => Ok(AdapterRule::Single),
        "sum" => Ok(AdapterRule::Sum),
        "gated" => Ok(AdapterRule::Gated),
        other => Err(Error::Format(format!("unknown adapter rule {other:?}"))),
    }
}

fn model_header(config: &ModelConfig) -> BTreeMap<String, String> {
    let exp = ExperimentConfig {
        backbone: config.backbone,
        d: config.embed_dim,
        layers: config.num_layers,
        heads: config.num_heads,
        seq_len: config.seq_len,
        vocab: config.vocab_size,
        ffn_mult: config.ffn_mult,
        dropout: config.dropout_rate,
        sites: config.adapter_sites.clone(),
        classes: config.num_classes,
        ..ExperimentConfig::default()
    };
    exp.render()
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| MODEL_KEYS.contains(k))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

impl Checkpoint {
    /// Capture the full state of `model`.
    pub fn from_model(model: &Model) -> Checkpoint {
        let mut header = model_header(&model.config);
        header.insert("rule".into(), rule_str(model.rule()).into());
        header.insert("tasks".into(), model.num_tasks().to_string());
        let sel = model.sites().iter().find_map(|s| s.selector.clone());
        if let Some(sel) = &sel {
            header.insert("variant".into(), sel.variant().to_string());
            header.insert("lambda".into(), sel.lambda().to_string());
        }
        let store = &model.store;
        let record = |id| Record {
            name: store.name(id).to_string(),
            tensor: Tensor::new(store.get(id).shape().to_vec(), store.get(id).data().to_vec()).expect("valid tensor"),
        };
        let mut records: Vec<Record> = model.base_params().into_iter().map(record).collect();
        for site in model.sites() {
            for l in site.stack.as_ref().expect("adapted").loras() {
                records.push(Record {
                    name: format!("{}.lora{}.meta", site.name, l.task_id),
                    tensor: Tensor::new(vec![1, 3], vec![l.task_id as f64, l.rank as f64, l.alpha]).expect("meta shape"),
                });
                records.push(record(l.a));
                records.push(record(l.b));
            }
            if let Some(sel) = &site.selector {
                records.extend(sel.heads().iter().map(|&h| record(h)));
            }
        }
        Checkpoint { header, records }
    }

    /// Adapter count per site name.
    pub fn adapter_records(&self) -> BTreeMap<String, usize> {
        self.count_suffix(".meta", ".lora")
    }

    /// Selector head count per site name.
    pub fn head_records(&self) -> BTreeMap<String, usize> {
        self.count_suffix("", ".selector.head")
    }

    fn count_suffix(&self, suffix: &str, marker: &str) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            if let Some(pos) = r.name.find(marker) {
                if r.name.ends_with(suffix) {
                    *out.entry(r.name[..pos].to_string()).or_insert(0) += 1;
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            let mut body = Vec::new();
            body.extend((r.name.len() as u32).to_le_bytes());
            body.extend(r.name.as_bytes());
            body.extend((r.tensor.shape().len() as u32).to_le_bytes());
            for &d in r.tensor.shape() {
                body.extend((d as u64).to_le_bytes());
            }
            body.extend(r.tensor.to_le_bytes());
            out.extend((body.len() as u64).to_le_bytes());
            out.extend(body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let nl = bytes
            .iter()
            .take(64)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing magic line".into()))?;
        let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("magic line is not UTF-8".into()))?;
        let version = magic
            .strip_prefix(MAGIC)
            .and_then(|v| v.strip_prefix(' '))
            .ok_or_else(|| Error::Format(format!("bad magic line {magic:?}")))?;
        if version != VERSION.to_string() {
            return Err(Error::Version {
                found: version.to_string(),
                expected: VERSION,
            });
        }
        let mut r = Reader { bytes, pos: nl + 1 };
        let hlen = r.u64()? as usize;
        let htext = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u64()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u64()? as usize;
            let mut body = Reader {
                bytes: r.take(len)?,
                pos: 0,
            };
            let name_len = body.u32()? as usize;
            let name = std::str::from_utf8(body.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let rank = body.u32()? as usize;
            let dims = (0..rank).map(|_| body.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
            if body.remaining() != numel * 8 {
                return Err(Error::Format(format!("{name}: payload does not match dims {dims:?}")));
            }
            let data = body
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            records.push(Record { name, tensor });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { header, records })
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn into_model(self) -> Result<Model> {
        let h = |k: &str| {
            self.header
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("header lacks {k}")))
        };
        let mut exp = ExperimentConfig::default();
        for k in MODEL_KEYS {
            exp.set(k, h(k)?).map_err(|e| Error::Format(format!("header: {e}")))?;
        }
        let config = exp.model_config();
        let rule = parse_rule(h("rule")?)?;
        let tasks: usize = h("tasks")?.parse().map_err(|_| Error::Format("bad task count".into()))?;
        let gated = self.header.contains_key("variant");
        let mut model = build_model(&config, 0)?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in self.records {
            if by_name.insert(r.name.clone(), r.tensor).is_some() {
                return Err(Error::Format(format!("duplicate record {}", r.name)));
            }
        }
        let mut take = |name: &str| by_name.remove(name).ok_or_else(|| Error::Format(format!("missing record {name}")));
        for id in model.base_params() {
            let t = take(model.store.name(id))?;
            model.store.assign(id, &t).map_err(|e| Error::Format(e.to_string()))?;
        }
        let variant: Option<SelectorVariant> = if gated { Some(h("variant")?.parse()?) } else { None };
        let lambda: f64 = if gated {
            h("lambda")?.parse().map_err(|_| Error::Format("bad lambda".into()))?
        } else {
            0.0
        };
        let mut store = std::mem::take(&mut model.store);
        let result = (|| -> Result<()> {
            for site in model.sites_mut() {
                let stack = site.stack.as_mut().expect("adapted");
                for t in 1..=tasks {
                    let prefix = format!("{}.lora{t}", site.name);
                    let meta = take(&format!("{prefix}.meta"))?;
                    let (task_id, alpha) = (meta.data()[0] as usize, meta.data()[2]);
                    let a = store.add(format!("{prefix}.A"), take(&format!("{prefix}.A"))?, false)?;
                    let b = store.add(format!("{prefix}.B"), take(&format!("{prefix}.B"))?, false)?;
                    let lora = LoraAdapter::from_params(&store, a, b, alpha, task_id)?;
                    if lora.rank as f64 != meta.data()[1] {
                        return Err(Error::Format(format!("{prefix}: rank does not match its tensors")));
                    }
                    stack.push_restored(lora)?;
                }
                if let Some(variant) = variant {
                    let sel_prefix = format!("{}.selector", site.name);
                    let heads = (0..=tasks)
                        .map(|i| {
                            let name = format!("{sel_prefix}.head{i}");
                            let t = take(&name)?;
                            store.add(name, t, false)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    site.selector = Some(AttentionalSelector::from_heads(sel_prefix, site.d_out, heads, variant, lambda)?);
                }
            }
            Ok(())
        })();
        model.store = store;
        result?;
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected record {extra}")));
        }
        model.set_rule(rule);
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model).to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)?.into_model()
}
