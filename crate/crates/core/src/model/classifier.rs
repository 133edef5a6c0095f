// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stacked Mamba sequence classifier reading out the last position.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lrp::{LayerKind, RuleConfig};
use crate::model::block::{linear, mamba_block, rms_norm, BlockTrace, BlockVars};
use crate::model::config::ModelConfig;
use crate::model::params::MambaParams;
use crate::tensor::Tensor;

/// Handles for one residual layer: `out = input + block(norm(input))`.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub input: Var,
    pub normed: Var,
    pub block: BlockVars,
    pub output: Var,
}

/// Handles to every intermediate of a classifier pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedded: Var,
    pub layers: Vec<LayerVars>,
    pub final_normed: Var,
    /// Final normalized hidden state at the last position, `[D]`.
    pub last: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub input: Tensor,
    pub normed: Tensor,
    pub block: BlockTrace,
    pub output: Tensor,
}

/// Forward values of a classifier pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub embedded: Tensor,
    pub layers: Vec<LayerTrace>,
    pub final_normed: Tensor,
    pub last: Tensor,
    pub logits: Tensor,
}

impl ModelVars {
    pub fn trace(&self, tape: &Tape) -> ForwardTrace {
        let v = |x: Var| tape.value(x).clone();
        ForwardTrace {
            embedded: v(self.embedded),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTrace {
                    input: v(l.input),
                    normed: v(l.normed),
                    block: l.block.trace(tape),
                    output: v(l.output),
                })
                .collect(),
            final_normed: v(self.final_normed),
            last: v(self.last),
            logits: v(self.logits),
        }
    }
}

/// Records the classifier on `tape`, starting from embeddings `x [L, D]`.
pub fn forward(
    tape: &mut Tape,
    params: &MambaParams<Var>,
    x: Var,
    rules: &RuleConfig,
) -> Result<ModelVars> {
    let shape = tape.value(x).shape().to_vec();
    let d = tape.value(params.final_norm_scale).numel();
    if shape.len() != 2 || shape[0] == 0 || shape[1] != d {
        return Err(Error::shape(
            "classify",
            format!("embeddings must be [L >= 1, {d}], got {shape:?}"),
        ));
    }
    let l = shape[0];
    let mut h = x;
    let mut layers = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let normed = rms_norm(tape, h, bp.norm_scale, rules)?;
        let block = mamba_block(tape, normed, bp, rules)?;
        let output = tape.add(h, block.output)?;
        layers.push(LayerVars {
            input: h,
            normed,
            block,
            output,
        });
        h = output;
    }
    let final_normed = rms_norm(tape, h, params.final_norm_scale, rules)?;
    let last = tape.slice(final_normed, 0, l - 1, 1)?;
    let last = tape.reshape(last, vec![d])?;
    let logits = linear(tape, last, params.head, params.head_bias, LayerKind::Head, rules)?;
    Ok(ModelVars {
        embedded: x,
        layers,
        final_normed,
        last,
        logits,
    })
}

/// A configured classifier with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaModel {
    config: ModelConfig,
    params: MambaParams<Tensor>,
}

impl MambaModel {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = MambaParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: MambaParams<Tensor>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &MambaParams<Tensor> {
        &self.params
    }

    pub fn into_params(self) -> MambaParams<Tensor> {
        self.params
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn param_leaves(&self, tape: &mut Tape) -> MambaParams<Var> {
        self.params
            .try_map(&self.config, |_, t| Ok(tape.leaf(t.clone())))
            .expect("parameters validated at construction")
    }

    /// Embedding rows for `tokens`, `[L, D]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Contract("token sequence is empty".into()));
        }
        let d = self.config.d_model;
        let table = self.params.embedding.data();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(&table[t * d..(t + 1) * d]);
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Records a forward pass from the embeddings `x`.
    pub fn record(&self, tape: &mut Tape, x: &Tensor, rules: &RuleConfig) -> Result<ModelVars> {
        let params = self.param_leaves(tape);
        let xv = tape.leaf(x.clone());
        forward(tape, &params, xv, rules)
    }

    /// Logits for already-embedded inputs.
    pub fn logits_from_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, x, &RuleConfig::plain())?;
        Ok(tape.value(vars.logits).clone())
    }

    pub fn classify(&self, tokens: &[usize]) -> Result<Tensor> {
        self.logits_from_embeddings(&self.embed(tokens)?)
    }

    /// Arg-max class (lowest index on ties).
    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(self.classify(tokens)?.data()))
    }

    /// All intermediates of a pass from the embeddings `x`.
    pub fn trace(&self, x: &Tensor, rules: &RuleConfig) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, x, rules)?;
        Ok(vars.trace(&tape))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
