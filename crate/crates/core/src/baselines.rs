// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference attribution methods: Gradient×Input, SmoothGrad, Integrated
//! Gradients and a random control.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lrp::{check_class, gradient_times_input, input_gradient, AttributionMap, Explainable, RuleConfig};
use crate::par::{self, Execution};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::tensor::Tensor;

/// Hyperparameters of the sampling-based baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineSpec {
    /// Noise mean, as a fraction of the input's embedding value range.
    pub noise_mean: f64,
    /// Noise standard deviation, as a fraction of the same range.
    pub noise_std: f64,
    /// Noise samples (SmoothGrad) or integration steps (IG).
    pub samples: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            noise_mean: 0.0,
            noise_std: 0.15,
            samples: 30,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() || !self.noise_mean.is_finite() {
            return Err(Error::Config(format!(
                "noise must be finite with std >= 0, got mean {} std {}",
                self.noise_mean, self.noise_std
            )));
        }
        Ok(())
    }
}

/// Plain Gradient×Input at the embedding layer.
pub fn gradient_x_input(model: &impl Explainable, tokens: &[usize], class: usize) -> Result<AttributionMap> {
    let x = model.embed(tokens)?;
    let (r, out) = gradient_times_input(model, &x, class, &RuleConfig::plain())?;
    AttributionMap::from_features(tokens.to_vec(), r, class, out, "gi", None)
}

fn mean_of(maps: Vec<Tensor>) -> Tensor {
    let m = maps.len() as f64;
    let mut acc = Tensor::zeros(maps[0].shape());
    for t in &maps {
        acc.add_assign(t);
    }
    acc.map(|v| v / m)
}

/// Mean Gradient×Input over noisy copies of the embeddings.
///
/// The noise scale is `noise_std × (max − min)` of the input's embedding
/// entries. Sample `k` draws from its own stream, so the result does not
/// depend on how samples are scheduled.
pub fn smoothgrad(
    model: &impl Explainable,
    tokens: &[usize],
    class: usize,
    spec: &BaselineSpec,
) -> Result<AttributionMap> {
    spec.validate()?;
    check_class(model, class)?;
    let x = model.embed(tokens)?;
    let out = model.logits(&x)?.data()[class];
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let (mean, std) = (spec.noise_mean * range, spec.noise_std * range);
    let r = if std == 0.0 && mean == 0.0 {
        gradient_times_input(model, &x, class, &RuleConfig::plain())?.0
    } else {
        let normal = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
        let maps = par::try_map_indexed(spec.samples, spec.execution, |k| {
            let mut rng = stream_rng(derive_seed(spec.seed, streams::SMOOTHGRAD), k as u64);
            let noisy = x.map(|v| v + normal.sample(&mut rng));
            Ok(gradient_times_input(model, &noisy, class, &RuleConfig::plain())?.0)
        })?;
        mean_of(maps)
    };
    AttributionMap::from_features(tokens.to_vec(), r, class, out, "smoothgrad", None)
}

/// Integrated Gradients from the zero embedding, midpoint rule with
/// `spec.samples` steps.
pub fn integrated_gradients(
    model: &impl Explainable,
    tokens: &[usize],
    class: usize,
    spec: &BaselineSpec,
) -> Result<AttributionMap> {
    spec.validate()?;
    check_class(model, class)?;
    let x = model.embed(tokens)?;
    let out = model.logits(&x)?.data()[class];
    let m = spec.samples;
    let grads = par::try_map_indexed(m, spec.execution, |k| {
        let alpha = (k as f64 + 0.5) / m as f64;
        Ok(input_gradient(model, &x.map(|v| alpha * v), class, &RuleConfig::plain())?.0)
    })?;
    let g = mean_of(grads);
    let r = Tensor::new(
        x.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(g, x)| g * x).collect(),
    )?;
    AttributionMap::from_features(tokens.to_vec(), r, class, out, "ig", None)
}

/// I.i.d. standard-normal token scores, independent of any model.
///
/// Each score sits in the first feature of its token's row (of `width`
/// features) so the map has the usual shape.
pub fn random_attribution(tokens: &[usize], width: usize, seed: u64) -> Result<AttributionMap> {
    if width == 0 {
        return Err(Error::Contract("feature width must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, streams::RANDOM_ATTRIBUTION);
    let mut features = Tensor::zeros(&[tokens.len(), width]);
    for i in 0..tokens.len() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        features.data_mut()[i * width] = z;
    }
    AttributionMap::from_features(tokens.to_vec(), features, 0, 0.0, "random", None)
}
