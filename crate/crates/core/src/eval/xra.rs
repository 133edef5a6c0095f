// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explanation-based retrieval accuracy: does the explanation point at the
//! needle?

use std::ops::Range;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::eval::perturbation::{ranking, Order};
use crate::rng::stream_rng;

/// Default number of top positions inspected.
pub const DEFAULT_XRA_K: usize = 2;

/// The `k` most relevant positions; ties go to the lower position.
pub fn top_k_positions(relevance: &[f64], k: usize) -> Vec<usize> {
    let mut r = ranking(relevance, Order::MoRF);
    r.truncate(k);
    r
}

/// 1 when any of the top-`k` positions lies inside `span`, else 0.
pub fn xra(relevance: &[f64], span: Range<usize>, k: usize) -> Result<bool> {
    if relevance.is_empty() {
        return Err(Error::Contract("empty attribution".into()));
    }
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    Ok(top_k_positions(relevance, k).iter().any(|p| span.contains(p)))
}

/// Like [`xra`] but breaking ties uniformly at random.
pub fn xra_random_ties(relevance: &[f64], span: Range<usize>, k: usize, seed: u64) -> Result<bool> {
    if relevance.is_empty() {
        return Err(Error::Contract("empty attribution".into()));
    }
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.shuffle(&mut stream_rng(seed, 0));
    // Stable sort keeps the shuffled order within ties.
    order.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]));
    Ok(order.iter().take(k).any(|p| span.contains(p)))
}

/// Probability that `k` positions drawn without replacement from `len`
/// hit a span of `width`: `1 − C(len−width, k) / C(len, k)`.
pub fn xra_chance(len: usize, width: usize, k: usize) -> f64 {
    if k >= len || width >= len {
        return 1.0;
    }
    let k = k.min(len);
    // C(len−width, k) / C(len, k) = Π_{i<k} (len−width−i)/(len−i)
    let mut miss = 1.0;
    for i in 0..k {
        if len - width <= i {
            return 1.0;
        }
        miss *= (len - width - i) as f64 / (len - i) as f64;
    }
    1.0 - miss
}

/// `relevance` with its values randomly permuted across positions.
pub fn shuffled(relevance: &[f64], seed: u64) -> Vec<f64> {
    let mut v = relevance.to_vec();
    v.shuffle(&mut stream_rng(seed, 0));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_hits() {
        let r = [0.1, 0.9, -0.5, 0.9, 0.2];
        assert_eq!(top_k_positions(&r, 2), vec![1, 3]);
        assert!(xra(&r, 3..4, 2).unwrap());
        assert!(!xra(&r, 4..5, 2).unwrap());
        assert!(matches!(xra(&[], 0..1, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn full_span_always_hits() {
        assert!(xra(&[0.0, -1.0, 3.0], 0..3, 2).unwrap());
        assert_eq!(xra_chance(3, 3, 2), 1.0);
    }

    #[test]
    fn uniform_attribution_hits_at_chance() {
        let (len, k) = (100, 2);
        let chance = xra_chance(len, 1, k);
        assert!((chance - 0.02).abs() < 1e-12);
        let uniform = vec![1.0; len];
        let trials = 20_000;
        let hits = (0..trials)
            .filter(|&s| xra_random_ties(&uniform, 37..38, k, s as u64).unwrap())
            .count();
        let rate = hits as f64 / trials as f64;
        let se = (chance * (1.0 - chance) / trials as f64).sqrt();
        assert!((rate - chance).abs() < 4.0 * se, "{rate} vs {chance}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let r: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut s = shuffled(&r, 4);
        assert_ne!(s, r);
        s.sort_by(f64::total_cmp);
        assert_eq!(s, r);
    }
}
