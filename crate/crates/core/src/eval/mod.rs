// SPDX-License-Identifier: MIT OR Apache-2.0

//! Conservation, perturbation faithfulness, retrieval accuracy and
//! relevance-position statistics.

mod conservation;
mod histogram;
mod perturbation;
mod xra;

pub use conservation::{conservation_scatter, pearson, ConservationPoint, ConservationReport};
pub use histogram::{relevance_position_histogram, PositionHistogram, DEFAULT_TOP_K};
pub use perturbation::{
    curve_set, delta_scores, fractions, mean_and_stderr, perturbation_curve, ranking, tokens_at, trapezoid,
    CurveSet, FaithfulnessScore, Order, PerturbMode, PerturbationCurve, Replacement, DEFAULT_STEPS,
};
pub use xra::{shuffled, top_k_positions, xra, xra_chance, xra_random_ties, DEFAULT_XRA_K};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::Method;
use crate::model::{argmax, MambaModel};
use crate::par::{self, Execution};

/// Dataset-level faithfulness of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessSummary {
    pub method: String,
    pub examples: usize,
    pub delta_flip_mean: f64,
    pub delta_flip_stderr: f64,
    pub delta_insert_mean: f64,
    pub delta_insert_stderr: f64,
    /// Per-example scores in dataset order.
    pub scores: Vec<FaithfulnessScore>,
    /// Mean logit at each grid point, per protocol.
    pub mean_curves: MeanCurves,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCurves {
    pub fractions: Vec<f64>,
    pub flip_morf: Vec<f64>,
    pub flip_lerf: Vec<f64>,
    pub insert_morf: Vec<f64>,
    pub insert_lerf: Vec<f64>,
}

/// Explains each example's predicted class with `method` and scores it by
/// flipping and insertion.
pub fn faithfulness(
    model: &MambaModel,
    dataset: &[Vec<usize>],
    method: &Method,
    steps: usize,
    replacement: Replacement,
    exec: Execution,
) -> Result<FaithfulnessSummary> {
    if dataset.is_empty() {
        return Err(Error::Contract("faithfulness needs at least one example".into()));
    }
    let grid = fractions(steps)?;
    let sets = par::try_map_indexed(dataset.len(), exec, |i| {
        let tokens = &dataset[i];
        let class = argmax(model.classify(tokens)?.data());
        let map = method.attribute(model, tokens, class, i as u64)?;
        curve_set(model, &map, steps, replacement)
    })?;
    let scores = sets.iter().map(delta_scores).collect::<Result<Vec<_>>>()?;
    let mean_of = |pick: fn(&CurveSet) -> &PerturbationCurve| -> Vec<f64> {
        (0..steps)
            .map(|j| sets.iter().map(|s| pick(s).logits[j]).sum::<f64>() / sets.len() as f64)
            .collect()
    };
    let mean_curves = MeanCurves {
        fractions: grid,
        flip_morf: mean_of(|s| &s.flip_morf),
        flip_lerf: mean_of(|s| &s.flip_lerf),
        insert_morf: mean_of(|s| &s.insert_morf),
        insert_lerf: mean_of(|s| &s.insert_lerf),
    };
    let flips: Vec<f64> = scores.iter().map(|s| s.delta_flip).collect();
    let inserts: Vec<f64> = scores.iter().map(|s| s.delta_insert).collect();
    let (delta_flip_mean, delta_flip_stderr) = mean_and_stderr(&flips);
    let (delta_insert_mean, delta_insert_stderr) = mean_and_stderr(&inserts);
    Ok(FaithfulnessSummary {
        method: method.name().to_string(),
        examples: dataset.len(),
        delta_flip_mean,
        delta_flip_stderr,
        delta_insert_mean,
        delta_insert_stderr,
        scores,
        mean_curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrp::RuleConfig;
    use crate::model::ModelConfig;

    #[test]
    fn summary_is_execution_independent() {
        let m = MambaModel::new(ModelConfig::small(10, 2), 2).unwrap();
        let data = vec![vec![1, 2, 3, 4], vec![5, 6, 7], vec![9, 8, 1, 1, 2]];
        let method = Method::MambaLrp(RuleConfig::default());
        let a = faithfulness(&m, &data, &method, 5, Replacement::Zero, Execution::Sequential).unwrap();
        let b = faithfulness(&m, &data, &method, 5, Replacement::Zero, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores.len(), 3);
        assert_eq!(a.mean_curves.flip_morf.len(), 5);
        assert!(faithfulness(&m, &[], &method, 5, Replacement::Zero, Execution::Sequential).is_err());
    }
}
