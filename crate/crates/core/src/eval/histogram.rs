// SPDX-License-Identifier: MIT OR Apache-2.0

//! How far back from the generated position the most relevant tokens sit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::xra::top_k_positions;

/// Default number of top positions per attribution.
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionHistogram {
    /// `counts[d]` is the number of top positions at distance `d`.
    pub counts: Vec<usize>,
    pub total: usize,
}

impl PositionHistogram {
    pub fn fraction_at(&self, distance: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(distance).copied().unwrap_or(0) as f64 / self.total as f64
    }

    /// Distance with the most mass (smallest on ties).
    pub fn mode(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        (max > 0).then(|| self.counts.iter().position(|&c| c == max).expect("max exists"))
    }
}

/// Accumulates `generated − relevant` over the `top_k` most relevant
/// context positions of each `(generated position, relevance)` item.
pub fn relevance_position_histogram(items: &[(usize, &[f64])], top_k: usize) -> Result<PositionHistogram> {
    let mut h = PositionHistogram::default();
    for &(generated, relevance) in items {
        for pos in top_k_positions(relevance, top_k) {
            let distance = generated.checked_sub(pos).ok_or_else(|| {
                Error::Contract(format!("relevant position {pos} lies after generated position {generated}"))
            })?;
            if h.counts.len() <= distance {
                h.counts.resize(distance + 1, 0);
            }
            h.counts[distance] += 1;
            h.total += 1;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_context() {
        let h = relevance_position_histogram(&[(1, &[0.7][..])], DEFAULT_TOP_K).unwrap();
        assert_eq!(h.counts, vec![0, 1]);
        assert_eq!(h.mode(), Some(1));
        assert_eq!(h.fraction_at(1), 1.0);
    }

    #[test]
    fn distances_accumulate() {
        let r = [0.0, 5.0, 1.0, 3.0];
        let h = relevance_position_histogram(&[(4, &r[..]), (3, &r[..3])], 2).unwrap();
        // item 1: top {1, 3} → distances 3, 1; item 2: top {1, 2} → 2, 1
        assert_eq!(h.counts, vec![0, 2, 1, 1]);
        assert_eq!(h.total, 4);
        assert!(relevance_position_histogram(&[(0, &r[..])], 1).is_err());
    }
}
