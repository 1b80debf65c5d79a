//! Mean gate distributions per adapted site.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::harness::tasks::Dataset;
use crate::model::{AdapterRule, Mode, Model, Site};
use crate::selector::GateVector;

/// Mean gate per adapter at one site, pooled over every token row.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteGates {
    pub layer: usize,
    pub site: Site,
    pub mean: Vec<f64>,
}

/// Eval-mode gate means of a gated model over `data`.
pub fn gate_distribution(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<SiteGates>> {
    if model.rule() != AdapterRule::Gated {
        return Err(Error::State("gate inspection needs a gated model".into()));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Usage("gate inspection needs data and a positive batch size".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sums: Vec<SiteGates> = Vec::new();
    let mut rows = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (batch, _) = data.batch(chunk)?;
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &batch, Mode::Eval, None, true)?;
        let mut chunk_rows = 0;
        for (k, rec) in out.gates.iter().enumerate() {
            let gv = GateVector(g.value(rec.gates).clone());
            chunk_rows = gv.rows();
            let col_sums: Vec<f64> = gv.column_means().iter().map(|m| m * gv.rows() as f64).collect();
            match sums.get_mut(k) {
                Some(s) => s.mean.iter_mut().zip(col_sums).for_each(|(a, b)| *a += b),
                None => sums.push(SiteGates {
                    layer: rec.layer,
                    site: rec.site,
                    mean: col_sums,
                }),
            }
        }
        rows += chunk_rows;
    }
    for s in &mut sums {
        s.mean.iter_mut().for_each(|v| *v /= rows as f64);
    }
    Ok(sums)
}
