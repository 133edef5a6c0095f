// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison of explained outputs with the summed relevance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::AttributionMap;
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationPoint {
    /// Explained logit `f_c(x)`.
    pub output: f64,
    /// `Σ_i R(x_i)`.
    pub relevance_sum: f64,
    /// `|f_c(x) − Σ_i R(x_i)|`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub points: Vec<ConservationPoint>,
    pub mean_gap: f64,
    pub max_gap: f64,
    /// Pearson correlation between outputs and relevance sums.
    pub correlation: f64,
}

impl ConservationReport {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let points: Vec<ConservationPoint> = pairs
            .into_iter()
            .map(|(output, relevance_sum)| ConservationPoint {
                output,
                relevance_sum,
                gap: (output - relevance_sum).abs(),
            })
            .collect();
        if points.is_empty() {
            return Err(Error::Contract("conservation report needs at least one example".into()));
        }
        let n = points.len() as f64;
        let mean_gap = points.iter().map(|p| p.gap).sum::<f64>() / n;
        let max_gap = points.iter().map(|p| p.gap).fold(0.0, f64::max);
        let xs: Vec<f64> = points.iter().map(|p| p.output).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.relevance_sum).collect();
        Ok(Self {
            correlation: pearson(&xs, &ys),
            points,
            mean_gap,
            max_gap,
        })
    }

    /// Whether `point` is conserved to `rel_tol · max(1, |f_c|)`.
    pub fn is_conserved(point: &ConservationPoint, rel_tol: f64) -> bool {
        point.gap <= rel_tol * point.output.abs().max(1.0)
    }

    /// Fraction of examples conserved to `rel_tol · max(1, |f_c|)`.
    pub fn conserved_fraction(&self, rel_tol: f64) -> f64 {
        let ok = self.points.iter().filter(|p| Self::is_conserved(p, rel_tol)).count();
        ok as f64 / self.points.len() as f64
    }

    /// Aligned text table of every example followed by the aggregates.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6}  {:>14}  {:>14}  {:>12}", "index", "output", "relevance_sum", "gap");
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i:>6}  {:>14.6e}  {:>14.6e}  {:>12.3e}",
                p.output, p.relevance_sum, p.gap
            );
        }
        let _ = writeln!(s, "mean_gap     {:.6e}", self.mean_gap);
        let _ = writeln!(s, "max_gap      {:.6e}", self.max_gap);
        let _ = writeln!(s, "correlation  {:.6}", self.correlation);
        s
    }
}

/// Pearson correlation; NaN when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Runs `attributor` on every example and compares outputs with sums.
///
/// `attributor(i, tokens)` returns the attribution of example `i`.
pub fn conservation_scatter<F>(dataset: &[Vec<usize>], attributor: F, exec: Execution) -> Result<ConservationReport>
where
    F: Fn(usize, &[usize]) -> Result<AttributionMap> + Sync + Send,
{
    let maps = par::try_map_indexed(dataset.len(), exec, |i| attributor(i, &dataset[i]))?;
    ConservationReport::from_pairs(maps.iter().map(|m| (m.output, m.total())))
}
