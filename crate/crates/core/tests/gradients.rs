// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use mamba_lrp::autodiff::{numeric_gradient, Tape};
use mamba_lrp::lrp::RuleConfig;
use mamba_lrp::model::forward;
use mamba_lrp::rng::stream_rng;

const TOLERANCE: f64 = 1e-5;

#[test]
fn primitives_and_models_match_finite_differences() {
    let results = common::gradient_suite(0x9ad, 5, 12);
    assert!(results.len() >= 100, "only {} cases", results.len());
    let failures: Vec<_> = results.iter().filter(|(_, e)| !(*e <= TOLERANCE)).collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = stream_rng(77, seed);
        let (model, x) = common::small_model(&mut rng);
        let gi = {
            let mut tape = Tape::new();
            let vars = model.record(&mut tape, &x, &RuleConfig::plain()).unwrap();
            let g = tape.backward_with_seed(vars.logits, mamba_lrp::Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
            g.wrt(vars.embedded)
        };
        let fd = numeric_gradient(
            |tape, xv| {
                let params = model.param_leaves(tape);
                let vars = forward(tape, &params, xv, &RuleConfig::plain())?;
                let l = tape.slice(vars.logits, 0, 0, 1)?;
                tape.sum(l)
            },
            &x,
            common::FD_STEP,
        )
        .unwrap();
        assert!(gi.max_abs_diff(&fd) < 1e-5, "seed {seed}: {}", gi.max_abs_diff(&fd));
    }
}
