// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use mamba_lrp::autodiff::{grad_check, Tape, Var};
use mamba_lrp::lrp::RuleConfig;
use mamba_lrp::model::{forward, MambaModel, MambaParams, ModelConfig};
use mamba_lrp::par::Execution;
use mamba_lrp::rng::stream_rng;
use mamba_lrp::tasks::{generate, generate_range, train, Example, TaskSpec, TrainConfig};
use mamba_lrp::{Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ w ⊙ y`, a scalar probe of a tensor-valued result.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.leaf(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One gradient-check case: name, operands and the op applied to them.
struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    op: Build,
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.op)(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let w = random_tensor(rng, &out_shape, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for k in 0..case.inputs.len() {
        let err = grad_check(
            |tape, xv| {
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { xv } else { tape.leaf(t.clone()) })
                    .collect();
                let y = (case.op)(tape, &vars)?;
                probe(tape, y, &w)
            },
            &case.inputs[k],
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let l = rng.random_range(1..=6);
    let e = rng.random_range(1..=3);
    let n = rng.random_range(1..=3);
    let k = rng.random_range(1..=4);
    let w = rng.random_range(1..=3);
    let mut t = |shape: &[usize]| random_tensor(rng, shape, -2.0, 2.0);
    let a = t(&[l, e]);
    let b = t(&[l, e]);
    let pos = a.map(|v| v.abs() + 0.5);
    let row = t(&[e]);
    let m1 = t(&[e, k]);
    let rows = t(&[l]);
    let conv_w = t(&[e, w]);
    let a_bar = t(&[l, e, n]).map(|v| 0.5 + 0.2 * v);
    let b_bar = t(&[l, e, n]);
    let c = t(&[l, n]);
    let c1 = t(&[1]);
    let unary = |f: fn(&mut Tape, Var) -> Result<Var>| -> Build { Box::new(move |tp, v| f(tp, v[0])) };
    vec![
        Case { name: "add", inputs: vec![a.clone(), b.clone()], op: Box::new(|tp, v| tp.add(v[0], v[1])) },
        Case { name: "add/suffix", inputs: vec![a.clone(), row.clone()], op: Box::new(|tp, v| tp.add(v[0], v[1])) },
        Case { name: "sub", inputs: vec![a.clone(), b.clone()], op: Box::new(|tp, v| tp.sub(v[0], v[1])) },
        Case { name: "mul", inputs: vec![a.clone(), b.clone()], op: Box::new(|tp, v| tp.mul(v[0], v[1])) },
        Case { name: "mul/scalar", inputs: vec![a.clone(), c1], op: Box::new(|tp, v| tp.mul(v[0], v[1])) },
        Case { name: "scale", inputs: vec![a.clone()], op: Box::new(|tp, v| tp.scale(v[0], -1.7)) },
        Case { name: "add_scalar", inputs: vec![a.clone()], op: Box::new(|tp, v| tp.add_scalar(v[0], 0.3)) },
        Case { name: "exp", inputs: vec![a.clone()], op: unary(|tp, x| tp.exp(x)) },
        Case { name: "sigmoid", inputs: vec![a.clone()], op: unary(|tp, x| tp.sigmoid(x)) },
        Case { name: "softplus", inputs: vec![a.clone()], op: unary(|tp, x| tp.softplus(x)) },
        Case { name: "powf", inputs: vec![pos], op: Box::new(|tp, v| tp.powf(v[0], -0.5)) },
        Case { name: "matmul", inputs: vec![a.clone(), m1], op: Box::new(|tp, v| tp.matmul(v[0], v[1])) },
        Case { name: "sum", inputs: vec![a.clone()], op: unary(|tp, x| tp.sum(x)) },
        Case { name: "sum_last", inputs: vec![a.clone()], op: unary(|tp, x| tp.sum_last(x)) },
        Case { name: "mean_last", inputs: vec![a.clone()], op: unary(|tp, x| tp.mean_last(x)) },
        Case { name: "scale_rows", inputs: vec![a.clone(), rows], op: Box::new(|tp, v| tp.scale_rows(v[0], v[1])) },
        Case { name: "slice", inputs: vec![a.clone()], op: Box::new(move |tp, v| tp.slice(v[0], 1, 0, e.div_ceil(2))) },
        Case { name: "concat", inputs: vec![a.clone(), b.clone()], op: Box::new(|tp, v| tp.concat(&[v[0], v[1]], 1)) },
        Case { name: "expand", inputs: vec![a.clone()], op: Box::new(move |tp, v| tp.expand(v[0], 2, n)) },
        Case { name: "reshape", inputs: vec![a.clone()], op: Box::new(move |tp, v| tp.reshape(v[0], vec![l * e])) },
        Case { name: "causal_conv", inputs: vec![a.clone(), conv_w], op: Box::new(|tp, v| tp.causal_conv(v[0], v[1])) },
        Case {
            name: "selective_scan",
            inputs: vec![a_bar, b_bar, c, a],
            op: Box::new(|tp, v| tp.selective_scan(v[0], v[1], v[2], v[3])),
        },
    ]
}

/// A random two-block model with `L ≤ 6` and `E, N ≤ 3`.
pub fn small_model(rng: &mut ChaCha8Rng) -> (MambaModel, Tensor) {
    let d_model = rng.random_range(1..=2);
    let cfg = ModelConfig {
        vocab_size: 8,
        num_blocks: 2,
        d_model,
        d_inner: rng.random_range(d_model..=3),
        d_state: rng.random_range(1..=3),
        conv_width: rng.random_range(1..=3),
        num_classes: 3,
        use_bias: rng.random_bool(0.5),
        use_d_skip: rng.random_bool(0.5),
    };
    let seed = rng.random();
    let params = MambaParams::init(&cfg, seed)
        .unwrap()
        .try_map(&cfg, |_, t| Ok::<_, mamba_lrp::Error>(t.map(|v| v * 2.0)))
        .unwrap();
    let model = MambaModel::from_params(cfg.clone(), params).unwrap();
    let l = rng.random_range(1..=6);
    let x = random_tensor(rng, &[l, cfg.d_model], -1.5, 1.5);
    (model, x)
}

/// Relative FD error of the full model with respect to its input and to
/// every parameter tensor.
pub fn model_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (model, x) = small_model(rng);
    let class = rng.random_range(0..3);
    let logit = |tape: &mut Tape, params: &MambaParams<Var>, xv: Var| -> Result<Var> {
        let vars = forward(tape, params, xv, &RuleConfig::plain())?;
        let l = tape.slice(vars.logits, 0, class, 1)?;
        tape.sum(l)
    };
    let mut worst = grad_check(
        |tape, xv| {
            let params = model.param_leaves(tape);
            logit(tape, &params, xv)
        },
        &x,
        FD_STEP,
    )?;
    let cfg = model.config().clone();
    let flat: Vec<Tensor> = model.params().flatten().into_iter().cloned().collect();
    for k in 1..flat.len() {
        let err = grad_check(
            |tape, pv| {
                let vars: Vec<Var> = flat
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { pv } else { tape.leaf(t.clone()) })
                    .collect();
                let params = MambaParams::from_flat(&cfg, vars)?;
                let xv = tape.leaf(x.clone());
                logit(tape, &params, xv)
            },
            &flat[k],
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient-check results over `rounds` random draws of every primitive
/// plus `models` random full models.
pub fn gradient_suite(seed: u64, rounds: usize, models: usize) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for r in 0..rounds {
        let mut rng = stream_rng(seed, r as u64);
        for case in primitive_cases(&mut rng) {
            let err = check_case(&case, &mut rng).unwrap_or(f64::INFINITY);
            out.push((case.name.to_string(), err));
        }
    }
    for m in 0..models {
        let mut rng = stream_rng(seed ^ 0xface, m as u64);
        out.push(("model".to_string(), model_case(&mut rng).unwrap_or(f64::INFINITY)));
    }
    out
}

/// Training settings used for the fixtures.
pub fn train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        max_epochs: epochs,
        ..TrainConfig::default()
    }
}

pub struct Trained {
    pub spec: TaskSpec,
    pub model: MambaModel,
    pub test: Vec<Example>,
    pub test_accuracy: f64,
}

/// Trains a model on `n_train` examples of `spec` and scores it on the
/// next `n_test` indices.
pub fn train_on(spec: TaskSpec, config: ModelConfig, n_train: usize, n_test: usize, tc: &TrainConfig) -> Trained {
    let data = generate(&spec, n_train, Execution::default()).unwrap();
    let test = generate_range(&spec, n_train as u64..(n_train + n_test) as u64, Execution::default()).unwrap();
    let init = MambaModel::new(config, tc.seed).unwrap();
    let model = train(&init, &data, tc).unwrap().model;
    let test_accuracy = mamba_lrp::tasks::evaluate_accuracy(&model, &test, Execution::default()).unwrap();
    Trained {
        spec,
        model,
        test,
        test_accuracy,
    }
}

pub fn tokens(data: &[Example]) -> Vec<Vec<usize>> {
    data.iter().map(|e| e.tokens.clone()).collect()
}
