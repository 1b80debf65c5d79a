//! Central-difference gradient oracle.

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over probed coordinates of |analytic − numeric| / max(1, |numeric|).
    pub max_rel_error: f64,
    pub probed: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compare `backward` gradients of the scalar built by `model_fn` against
/// central differences over every trainable coordinate of `store`. Frozen
/// parameters are not probed. Parameter values are restored afterwards and
/// gradients are left cleared.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, mut model_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Usage(format!("finite difference step must be positive, got {eps}")));
    }
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = model_fn(&mut graph, store)?;
    graph.backward(loss, store)?;
    drop(graph);

    let ids = store.trainable_ids();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let t = store.get(id);
            t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = model_fn(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probed: 0,
        worst: None,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        for (i, &analytic_i) in grad.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at {}[{i}] is {numeric}",
                    store.name(id)
                )));
            }
            let err = (analytic_i - numeric).abs() / numeric.abs().max(1.0);
            report.probed += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(3.0), true).unwrap();
        let r = finite_diff_check(&mut s, DEFAULT_EPS, |g, st| {
            let w = g.param(st, id);
            g.mul(w, w)
        })
        .unwrap();
        assert_eq!(r.probed, 1);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(s.get(id).data()[0], 3.0);
    }

    #[test]
    fn frozen_coordinates_are_skipped() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::filled(&[1, 3], 0.5), false).unwrap();
        let b = s.add("b", Tensor::filled(&[1, 2], -0.25), true).unwrap();
        let r = finite_diff_check(&mut s, DEFAULT_EPS, |g, st| {
            let (av, bv) = (g.param(st, a), g.param(st, b));
            let (sa, sb) = (g.sum(av)?, g.sum(bv)?);
            let p = g.mul(sa, sb)?;
            g.mul(p, p)
        })
        .unwrap();
        assert_eq!(r.probed, 2);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(0.0), true).unwrap();
        let err = finite_diff_check(&mut s, 1e300, |g, st| {
            let w = g.param(st, id);
            let big = g.scale(w, 1e300)?;
            g.mul(big, big)
        });
        assert!(err.is_err());
    }
}
