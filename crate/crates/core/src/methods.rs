// SPDX-License-Identifier: MIT OR Apache-2.0

//! A single entry point over every attribution method.

use std::fmt;

use crate::baselines::{gradient_x_input, integrated_gradients, random_attribution, smoothgrad, BaselineSpec};
use crate::error::{Error, Result};
use crate::lrp::{attribute_explicit, attribute_mambalrp, AttributionMap, Explainable, RuleConfig};
use crate::model::MambaModel;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// Gradient×Input on the model with stop-gradients from the rules.
    MambaLrp(RuleConfig),
    /// The same relevance through explicit per-layer rules.
    Explicit(RuleConfig),
    GradientXInput,
    SmoothGrad(BaselineSpec),
    IntegratedGradients(BaselineSpec),
    Random { seed: u64 },
}

/// Names accepted by [`Method::parse`].
pub const METHOD_NAMES: [&str; 6] = ["mambalrp", "mambalrp-explicit", "gi", "smoothgrad", "ig", "random"];

impl Method {
    /// Builds a method from its name; `rules`, `spec` and `seed` are used by
    /// the methods that take them.
    pub fn parse(name: &str, rules: &RuleConfig, spec: &BaselineSpec, seed: u64) -> Result<Self> {
        Ok(match name {
            "mambalrp" => Method::MambaLrp(rules.clone()),
            "mambalrp-explicit" => Method::Explicit(rules.clone()),
            "gi" => Method::GradientXInput,
            "smoothgrad" => Method::SmoothGrad(*spec),
            "ig" => Method::IntegratedGradients(*spec),
            "random" => Method::Random { seed },
            other => {
                return Err(Error::Config(format!(
                    "unknown method `{other}` (expected one of {})",
                    METHOD_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::MambaLrp(r) if r.is_plain() => "gi",
            Method::MambaLrp(_) => "mambalrp",
            Method::Explicit(_) => "mambalrp-explicit",
            Method::GradientXInput => "gi",
            Method::SmoothGrad(_) => "smoothgrad",
            Method::IntegratedGradients(_) => "ig",
            Method::Random { .. } => "random",
        }
    }

    /// Attribution of `tokens` for `class`. `example` selects the random
    /// stream of the stochastic methods, so each example of a dataset gets
    /// independent yet reproducible noise.
    pub fn attribute(
        &self,
        model: &MambaModel,
        tokens: &[usize],
        class: usize,
        example: u64,
    ) -> Result<AttributionMap> {
        match self {
            Method::MambaLrp(rules) => attribute_mambalrp(model, tokens, class, rules),
            Method::Explicit(rules) => attribute_explicit(model, tokens, class, rules),
            Method::GradientXInput => gradient_x_input(model, tokens, class),
            Method::SmoothGrad(spec) => {
                let spec = BaselineSpec {
                    seed: derive_seed(spec.seed, example),
                    ..*spec
                };
                smoothgrad(model, tokens, class, &spec)
            }
            Method::IntegratedGradients(spec) => integrated_gradients(model, tokens, class, spec),
            Method::Random { seed } => {
                let mut map = random_attribution(tokens, model.config().d_model, derive_seed(*seed, example))?;
                map.class_index = class;
                map.output = model.logits(&model.embed(tokens)?)?.data()[class];
                Ok(map)
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
