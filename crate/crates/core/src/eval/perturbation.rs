// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token flipping and insertion curves, ranked by signed relevance.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::{AttributionMap, Explainable};
use crate::tensor::Tensor;

/// Default number of grid points, `0, 0.1, …, 1`.
pub const DEFAULT_STEPS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// Start from the clean input and remove ranked tokens.
    Flip,
    /// Start fully perturbed and restore ranked tokens.
    Insert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    /// Most relevant first: descending signed relevance.
    MoRF,
    /// Least relevant first: ascending signed relevance.
    LeRF,
}

/// What a perturbed token's embedding is replaced with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replacement {
    #[default]
    Zero,
    /// The embedding of the padding token (id 0).
    PadToken,
}

impl FromStr for Replacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Replacement::Zero),
            "pad" | "pad-token" => Ok(Replacement::PadToken),
            other => Err(Error::Config(format!("unknown replacement `{other}` (expected zero or pad)"))),
        }
    }
}

impl fmt::Display for Replacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Replacement::Zero => "zero",
            Replacement::PadToken => "pad",
        })
    }
}

/// Predicted-class logit as ranked tokens are perturbed or restored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub mode: PerturbMode,
    pub order: Order,
    pub fractions: Vec<f64>,
    pub logits: Vec<f64>,
    pub auc: f64,
}

/// `steps` evenly spaced fractions from 0 to 1 inclusive.
pub fn fractions(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Contract(format!("need at least 2 steps, got {steps}")));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps).map(|i| i as f64 / last).collect())
}

/// Number of tokens affected at grid point `i` of `steps` for length `len`:
/// `i·len / (steps−1)` rounded half up, in integer arithmetic.
pub fn tokens_at(i: usize, steps: usize, len: usize) -> usize {
    let denom = steps - 1;
    (i * len + denom / 2) / denom
}

/// Trapezoidal area under `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Token positions in perturbation order; ties go to the lower position.
pub fn ranking(relevance: &[f64], order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_value = match order {
            Order::MoRF => relevance[b].total_cmp(&relevance[a]),
            Order::LeRF => relevance[a].total_cmp(&relevance[b]),
        };
        if by_value == Ordering::Equal {
            a.cmp(&b)
        } else {
            by_value
        }
    });
    idx
}

fn replacement_row(model: &impl Explainable, width: usize, replacement: Replacement) -> Result<Vec<f64>> {
    match replacement {
        Replacement::Zero => Ok(vec![0.0; width]),
        Replacement::PadToken => Ok(model.embed(&[0])?.into_data()),
    }
}

/// Curve of the `class` logit for one perturbation protocol.
pub fn perturbation_curve(
    model: &impl Explainable,
    tokens: &[usize],
    relevance: &[f64],
    class: usize,
    mode: PerturbMode,
    order: Order,
    steps: usize,
    replacement: Replacement,
) -> Result<PerturbationCurve> {
    if relevance.len() != tokens.len() {
        return Err(Error::Contract(format!(
            "attribution covers {} tokens, sequence has {}",
            relevance.len(),
            tokens.len()
        )));
    }
    let fr = fractions(steps)?;
    let clean = model.embed(tokens)?;
    let (len, width) = (clean.shape()[0], clean.shape()[1]);
    let fill = replacement_row(model, width, replacement)?;
    let ranked = ranking(relevance, order);
    let mut logits = Vec::with_capacity(steps);
    for i in 0..steps {
        let k = tokens_at(i, steps, len);
        let mut perturbed = vec![mode == PerturbMode::Insert; len];
        for &pos in &ranked[..k] {
            perturbed[pos] = mode == PerturbMode::Flip;
        }
        let mut x = clean.clone().into_data();
        for (pos, _) in perturbed.iter().enumerate().filter(|(_, &p)| p) {
            x[pos * width..(pos + 1) * width].copy_from_slice(&fill);
        }
        let x = Tensor::new(vec![len, width], x)?;
        logits.push(model.logits(&x)?.data()[class]);
    }
    let auc = trapezoid(&fr, &logits);
    Ok(PerturbationCurve {
        mode,
        order,
        fractions: fr,
        logits,
        auc,
    })
}

/// The four curves needed for both faithfulness scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub flip_morf: PerturbationCurve,
    pub flip_lerf: PerturbationCurve,
    pub insert_morf: PerturbationCurve,
    pub insert_lerf: PerturbationCurve,
}

/// Area differences between LeRF and MoRF curves; higher is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessScore {
    /// `A^F_LeRF − A^F_MoRF`.
    pub delta_flip: f64,
    /// `A^I_MoRF − A^I_LeRF`.
    pub delta_insert: f64,
    pub auc_flip_morf: f64,
    pub auc_flip_lerf: f64,
    pub auc_insert_morf: f64,
    pub auc_insert_lerf: f64,
}

/// ΔA^F and ΔA^I from a curve set.
pub fn delta_scores(curves: &CurveSet) -> Result<FaithfulnessScore> {
    let all = [
        (&curves.flip_morf, PerturbMode::Flip, Order::MoRF),
        (&curves.flip_lerf, PerturbMode::Flip, Order::LeRF),
        (&curves.insert_morf, PerturbMode::Insert, Order::MoRF),
        (&curves.insert_lerf, PerturbMode::Insert, Order::LeRF),
    ];
    for (c, mode, order) in all {
        if c.mode != mode || c.order != order {
            return Err(Error::Contract(format!(
                "expected a {mode:?}/{order:?} curve, got {:?}/{:?}",
                c.mode, c.order
            )));
        }
        if c.fractions != curves.flip_morf.fractions || c.logits.len() != c.fractions.len() {
            return Err(Error::Contract("curves use different step grids".into()));
        }
    }
    Ok(FaithfulnessScore {
        delta_flip: curves.flip_lerf.auc - curves.flip_morf.auc,
        delta_insert: curves.insert_morf.auc - curves.insert_lerf.auc,
        auc_flip_morf: curves.flip_morf.auc,
        auc_flip_lerf: curves.flip_lerf.auc,
        auc_insert_morf: curves.insert_morf.auc,
        auc_insert_lerf: curves.insert_lerf.auc,
    })
}

/// All four curves for one attribution, tracking its explained class.
pub fn curve_set(
    model: &impl Explainable,
    attribution: &AttributionMap,
    steps: usize,
    replacement: Replacement,
) -> Result<CurveSet> {
    let curve = |mode, order| {
        perturbation_curve(
            model,
            &attribution.tokens,
            &attribution.token_relevance,
            attribution.class_index,
            mode,
            order,
            steps,
            replacement,
        )
    };
    Ok(CurveSet {
        flip_morf: curve(PerturbMode::Flip, Order::MoRF)?,
        flip_lerf: curve(PerturbMode::Flip, Order::LeRF)?,
        insert_morf: curve(PerturbMode::Insert, Order::MoRF)?,
        insert_lerf: curve(PerturbMode::Insert, Order::LeRF)?,
    })
}

/// Mean and standard error of a sample.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrp::{attribute_mambalrp, RuleConfig};
    use crate::model::{MambaModel, ModelConfig};
    use proptest::prelude::*;

    fn model() -> MambaModel {
        MambaModel::new(ModelConfig::small(10, 2), 3).unwrap()
    }

    #[test]
    fn grid_and_counts() {
        assert_eq!(fractions(11).unwrap()[3], 0.3);
        assert_eq!(tokens_at(0, 11, 7), 0);
        assert_eq!(tokens_at(10, 11, 7), 7);
        assert_eq!(tokens_at(5, 11, 7), 4);
        assert!(matches!(fractions(1), Err(Error::Contract(_))));
    }

    #[test]
    fn endpoints_coincide() {
        let m = model();
        let tokens = [1, 4, 2, 8, 5, 7];
        let a = attribute_mambalrp(&m, &tokens, 1, &RuleConfig::default()).unwrap();
        let set = curve_set(&m, &a, DEFAULT_STEPS, Replacement::Zero).unwrap();
        let clean = m.classify(&tokens).unwrap().data()[1];
        assert_eq!(set.flip_morf.logits[0], clean);
        assert_eq!(set.insert_lerf.logits[10], clean);
        assert_eq!(set.flip_morf.logits[10], set.insert_morf.logits[0]);
        assert_eq!(set.flip_lerf.logits[10], set.insert_lerf.logits[0]);
        assert_eq!(a.output, clean);
    }

    #[test]
    fn identical_orders_give_zero_delta() {
        let c = PerturbationCurve {
            mode: PerturbMode::Flip,
            order: Order::MoRF,
            fractions: vec![0.0, 1.0],
            logits: vec![1.0, 0.0],
            auc: 0.5,
        };
        let set = CurveSet {
            flip_morf: c.clone(),
            flip_lerf: PerturbationCurve { order: Order::LeRF, ..c.clone() },
            insert_morf: PerturbationCurve { mode: PerturbMode::Insert, ..c.clone() },
            insert_lerf: PerturbationCurve {
                mode: PerturbMode::Insert,
                order: Order::LeRF,
                ..c.clone()
            },
        };
        let s = delta_scores(&set).unwrap();
        assert_eq!((s.delta_flip, s.delta_insert), (0.0, 0.0));
        let mut bad = set.clone();
        bad.flip_lerf.fractions = vec![0.0, 0.5];
        assert!(matches!(delta_scores(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let m = model();
        let r = perturbation_curve(&m, &[1, 2], &[0.5], 0, PerturbMode::Flip, Order::MoRF, 3, Replacement::Zero);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn negating_relevance_negates_scores() {
        let m = model();
        let tokens = [3, 3, 1, 9, 2];
        let a = attribute_mambalrp(&m, &tokens, 0, &RuleConfig::default()).unwrap();
        let s = delta_scores(&curve_set(&m, &a, 6, Replacement::Zero).unwrap()).unwrap();
        let n = delta_scores(&curve_set(&m, &a.negated(), 6, Replacement::Zero).unwrap()).unwrap();
        assert_eq!(n.delta_flip, -s.delta_flip);
        assert_eq!(n.delta_insert, -s.delta_insert);
    }

    #[test]
    fn pad_replacement_uses_pad_embedding() {
        let m = model();
        let tokens = [4, 5];
        let c = perturbation_curve(&m, &tokens, &[1.0, 0.0], 0, PerturbMode::Flip, Order::MoRF, 3, Replacement::PadToken)
            .unwrap();
        assert_eq!(c.logits[2], m.classify(&[0, 0]).unwrap().data()[0]);
    }

    proptest! {
        #[test]
        fn orders_reverse_for_distinct_values(values in proptest::collection::hash_set(-1000i32..1000, 1..20)) {
            let r: Vec<f64> = values.into_iter().map(|v| v as f64).collect();
            let mut m = ranking(&r, Order::MoRF);
            m.reverse();
            prop_assert_eq!(m, ranking(&r, Order::LeRF));
        }

        #[test]
        fn trapezoid_ignores_interpolated_midpoints(ys in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
            let mut xs2 = Vec::new();
            let mut ys2 = Vec::new();
            for i in 0..ys.len() {
                xs2.push(xs[i]);
                ys2.push(ys[i]);
                if i + 1 < ys.len() {
                    xs2.push(xs[i] + 0.5);
                    ys2.push((ys[i] + ys[i + 1]) / 2.0);
                }
            }
            prop_assert!((trapezoid(&xs, &ys) - trapezoid(&xs2, &ys2)).abs() < 1e-9);
        }
    }
}
