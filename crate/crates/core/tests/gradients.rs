//! End-to-end gradient checks of the model against central differences.

mod common;

use amlora_core::autodiff::{finite_diff_check, DEFAULT_EPS};
use amlora_core::rng::{gaussian_vec, rng_for};
use amlora_core::{Mode, ModelConfig, Site, Tensor};
use common::{amlora_gradient_check, toy_batch, toy_config, two_task_amlora};

#[test]
fn amlora_loss_matches_central_differences_over_trainable_set() {
    let report = amlora_gradient_check(0.05);
    assert!(report.probed > 0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_base_parameter_matches_central_differences() {
    for sites in [vec![Site::Query, Site::Value], vec![Site::Key, Site::Output, Site::Ffn]] {
        let cfg = ModelConfig {
            adapter_sites: sites.into_iter().collect(),
            ..toy_config()
        };
        let mut m = two_task_amlora(&cfg, 0.0);
        let all: Vec<_> = m.store.ids().collect();
        // perturb norms and biases away from their symmetric init
        let mut rng = rng_for(11, "perturb");
        for &id in &all {
            let t = m.store.get(id).clone();
            let noise = gaussian_vec(&mut rng, t.numel(), 0.1);
            let data = t.data().iter().zip(noise).map(|(a, b)| a + b).collect();
            m.store.assign(id, &Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
        }
        m.store.set_trainable_exactly(&all);
        let (batch, labels) = toy_batch(&cfg, 2);
        let model = m.clone();
        let report = finite_diff_check(&mut m.store, DEFAULT_EPS, |g, store| {
            let mut view = model.clone();
            view.store = store.clone();
            let out = view.forward(g, &batch, Mode::Eval, None, false)?;
            g.cross_entropy(out.logits, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
