// SPDX-License-Identifier: MIT OR Apache-2.0

use mamba_lrp::baselines::{integrated_gradients, smoothgrad, BaselineSpec};
use mamba_lrp::lrp::Explainable;
use mamba_lrp::model::{MambaModel, ModelConfig};
use mamba_lrp::Tensor;

#[test]
fn integrated_gradients_is_complete_at_300_steps() {
    for seed in 0..4 {
        let model = MambaModel::new(ModelConfig::small(12, 2), seed).unwrap();
        let tokens = [3, 7, 1, 9, 4, 4, 11];
        let spec = BaselineSpec {
            samples: 300,
            ..BaselineSpec::default()
        };
        let map = integrated_gradients(&model, &tokens, 1, &spec).unwrap();
        let x = model.embed(&tokens).unwrap();
        let f_x = model.logits(&x).unwrap().data()[1];
        let f_0 = model.logits(&Tensor::zeros(x.shape())).unwrap().data()[1];
        let gap = (map.total() - (f_x - f_0)).abs();
        assert!(gap <= 0.01 * (f_x - f_0).abs(), "seed {seed}: Σ R {} vs Δf {}", map.total(), f_x - f_0);
    }
}

#[test]
fn smoothgrad_single_sample_is_reproducible() {
    let model = MambaModel::new(ModelConfig::small(12, 2), 2).unwrap();
    let spec = BaselineSpec {
        samples: 1,
        seed: 41,
        ..BaselineSpec::default()
    };
    let a = smoothgrad(&model, &[1, 2, 3], 0, &spec).unwrap();
    let b = smoothgrad(&model, &[1, 2, 3], 0, &spec).unwrap();
    assert_eq!(a, b);
    let c = smoothgrad(&model, &[1, 2, 3], 0, &BaselineSpec { seed: 42, ..spec }).unwrap();
    assert_ne!(a.token_relevance, c.token_relevance);
}
