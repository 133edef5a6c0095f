// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution records and the detached-gradient MambaLRP path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lrp::rules::RuleConfig;
use crate::model::{forward, MambaModel};
use crate::tensor::Tensor;

/// Relevance of every input token and embedding feature for one output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub tokens: Vec<usize>,
    /// Per-token relevance: the signed sum of the token's feature row.
    pub token_relevance: Vec<f64>,
    /// `[L, D]` relevance of each embedding entry.
    pub feature_relevance: Tensor,
    pub class_index: usize,
    /// The explained logit `f_c(x)`.
    pub output: f64,
    pub method: String,
    /// Rule assignment, for rule-based methods.
    pub rules: Option<RuleConfig>,
}

impl AttributionMap {
    /// Builds a map from per-feature relevance, pooling rows by summation.
    pub fn from_features(
        tokens: Vec<usize>,
        feature_relevance: Tensor,
        class_index: usize,
        output: f64,
        method: impl Into<String>,
        rules: Option<RuleConfig>,
    ) -> Result<Self> {
        if feature_relevance.rank() != 2 || feature_relevance.shape()[0] != tokens.len() {
            return Err(Error::shape(
                "attribution",
                format!(
                    "feature relevance {:?} for {} tokens",
                    feature_relevance.shape(),
                    tokens.len()
                ),
            ));
        }
        let token_relevance = (0..tokens.len())
            .map(|i| feature_relevance.row(i).iter().sum())
            .collect();
        Ok(Self {
            tokens,
            token_relevance,
            feature_relevance,
            class_index,
            output,
            method: method.into(),
            rules,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `Σ_i R(x_i)`.
    pub fn total(&self) -> f64 {
        self.token_relevance.iter().sum()
    }

    /// Copy with every relevance value negated.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.token_relevance.iter_mut().for_each(|v| *v = -*v);
        out.feature_relevance = out.feature_relevance.map(|v| -v);
        out
    }
}

/// A differentiable sequence classifier that attribution methods can probe.
///
/// Implementors map token ids to embeddings and record the logits of an
/// embedded sequence on a tape under a given rule assignment.
pub trait Explainable: Sync {
    fn num_classes(&self) -> usize;

    /// Embedding rows `[L, D]` for `tokens`.
    fn embed(&self, tokens: &[usize]) -> Result<Tensor>;

    /// Records `logits [C]` of the embedded input `x`.
    fn record_logits(&self, tape: &mut Tape, x: Var, rules: &RuleConfig) -> Result<Var>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.record_logits(&mut tape, xv, &RuleConfig::plain())?;
        Ok(tape.value(out).clone())
    }
}

impl Explainable for MambaModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        MambaModel::embed(self, tokens)
    }

    fn record_logits(&self, tape: &mut Tape, x: Var, rules: &RuleConfig) -> Result<Var> {
        let params = self.param_leaves(tape);
        Ok(forward(tape, &params, x, rules)?.logits)
    }
}

pub(crate) fn check_class(model: &impl Explainable, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::Contract(format!(
            "class index {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

/// `(∂f_c/∂x, f_c(x))` under `rules`.
pub fn input_gradient(
    model: &impl Explainable,
    x: &Tensor,
    class: usize,
    rules: &RuleConfig,
) -> Result<(Tensor, f64)> {
    check_class(model, class)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let logits = model.record_logits(&mut tape, xv, rules)?;
    let n = tape.value(logits).numel();
    let mut seed = Tensor::zeros(tape.value(logits).shape());
    if class >= n {
        return Err(Error::Contract(format!("class {class} beyond {n} logits")));
    }
    seed.data_mut()[class] = 1.0;
    let out = tape.value(logits).data()[class];
    let grads = tape.backward_with_seed(logits, seed)?;
    let g = grads.wrt(xv);
    if !g.is_finite() || !out.is_finite() {
        return Err(Error::Numeric("non-finite gradient or output".into()));
    }
    Ok((g, out))
}

/// Gradient×Input at the embedding layer under `rules`.
pub(crate) fn gradient_times_input(
    model: &impl Explainable,
    x: &Tensor,
    class: usize,
    rules: &RuleConfig,
) -> Result<(Tensor, f64)> {
    let (g, out) = input_gradient(model, x, class, rules)?;
    let r = Tensor::new(
        x.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(g, x)| g * x).collect(),
    )?;
    Ok((r, out))
}

/// MambaLRP via Gradient×Input on the detached model.
///
/// With every rule off this is plain Gradient×Input and the record is
/// labelled `gi`, so both routes produce identical output.
pub fn attribute_mambalrp(
    model: &impl Explainable,
    tokens: &[usize],
    class: usize,
    rules: &RuleConfig,
) -> Result<AttributionMap> {
    rules.validate()?;
    let x = model.embed(tokens)?;
    let (r, out) = gradient_times_input(model, &x, class, rules)?;
    let (method, echo) = if rules.is_plain() {
        ("gi", None)
    } else {
        ("mambalrp", Some(rules.clone()))
    };
    AttributionMap::from_features(tokens.to_vec(), r, class, out, method, echo)
}
