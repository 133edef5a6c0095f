// SPDX-License-Identifier: MIT OR Apache-2.0

//! Which conservation fixes are active during relevance propagation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment of the multiplicative gate `y = z_A · z_B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// `y = 0.5 (z_A z_B) + 0.5 [z_A z_B]_cst`: each branch receives half.
    Half,
    /// `y = z_A · [z_B]_cst`: all relevance goes to the SSM branch.
    DetachGateZb,
    /// Plain product; relevance is doubled.
    Off,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half" => Ok(GateMode::Half),
            "detach-gate-zb" | "detach-zb" => Ok(GateMode::DetachGateZb),
            "off" => Ok(GateMode::Off),
            other => Err(Error::Config(format!(
                "unknown gate mode `{other}` (expected half, detach-zb or off)"
            ))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Half => "half",
            GateMode::DetachGateZb => "detach-zb",
            GateMode::Off => "off",
        })
    }
}

/// Layer families a rule can be assigned to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Embedding,
    InProj,
    Conv1d,
    XProj,
    DtProj,
    OutProj,
    Norm,
    Head,
}

impl LayerKind {
    /// Layers that are linear in their relevance-carrying input, where the
    /// generalized γ-rule is defined.
    pub fn supports_gamma(self) -> bool {
        matches!(
            self,
            LayerKind::InProj | LayerKind::Conv1d | LayerKind::OutProj | LayerKind::Head
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Embedding => "embedding",
            LayerKind::InProj => "in_proj",
            LayerKind::Conv1d => "conv1d",
            LayerKind::XProj => "x_proj",
            LayerKind::DtProj => "dt_proj",
            LayerKind::OutProj => "out_proj",
            LayerKind::Norm => "norm",
            LayerKind::Head => "head",
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        const ALL: [LayerKind; 8] = [
            LayerKind::Embedding,
            LayerKind::InProj,
            LayerKind::Conv1d,
            LayerKind::XProj,
            LayerKind::DtProj,
            LayerKind::OutProj,
            LayerKind::Norm,
            LayerKind::Head,
        ];
        ALL.into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer kind `{s}`")))
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_CONV_GAMMA: f64 = 0.25;

/// The rule assignment used for one attribution.
///
/// All detaches off and no γ reproduces plain Gradient×Input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub silu_detach: bool,
    pub ssm_detach: bool,
    pub gate: GateMode,
    pub rmsnorm_detach: bool,
    /// γ per layer kind; absent kinds use LRP-0.
    pub gamma: BTreeMap<LayerKind, f64>,
    /// Stabilizer added (sign-matched) to explicit-rule denominators.
    pub epsilon: f64,
}

impl Default for RuleConfig {
    /// Full rule set with γ = 0.25 on the convolution, LRP-0 elsewhere.
    fn default() -> Self {
        let mut cfg = Self::lrp0();
        cfg.gamma.insert(LayerKind::Conv1d, DEFAULT_CONV_GAMMA);
        cfg
    }
}

impl RuleConfig {
    /// All conservation fixes on, LRP-0 in every linear layer.
    pub fn lrp0() -> Self {
        Self {
            silu_detach: true,
            ssm_detach: true,
            gate: GateMode::Half,
            rmsnorm_detach: true,
            gamma: BTreeMap::new(),
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// No modifications: the gradient of the plain network.
    pub fn plain() -> Self {
        Self {
            silu_detach: false,
            ssm_detach: false,
            gate: GateMode::Off,
            rmsnorm_detach: false,
            gamma: BTreeMap::new(),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_gamma(mut self, kind: LayerKind, gamma: f64) -> Self {
        self.gamma.insert(kind, gamma);
        self
    }

    /// True when nothing alters the plain gradient.
    pub fn is_plain(&self) -> bool {
        !self.silu_detach
            && !self.ssm_detach
            && self.gate == GateMode::Off
            && !self.rmsnorm_detach
            && self.gamma.values().all(|&g| g == 0.0)
    }

    /// Active (non-zero) γ for `kind`.
    pub fn gamma_for(&self, kind: LayerKind) -> Option<f64> {
        self.gamma.get(&kind).copied().filter(|&g| g != 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "stabilizer epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        for (&kind, &g) in &self.gamma {
            if !kind.supports_gamma() {
                return Err(Error::Config(format!(
                    "gamma rule is not defined for layer kind `{}`",
                    kind.name()
                )));
            }
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::Config(format!(
                    "gamma for `{}` must be >= 0, got {g}",
                    kind.name()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_conv_gamma_composite() {
        let cfg = RuleConfig::default();
        assert_eq!(cfg.gamma_for(LayerKind::Conv1d), Some(0.25));
        assert_eq!(cfg.gamma_for(LayerKind::InProj), None);
        assert_eq!(cfg.gamma_for(LayerKind::OutProj), None);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn gamma_on_unsupported_kind_is_rejected() {
        let cfg = RuleConfig::lrp0().with_gamma(LayerKind::DtProj, 0.25);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RuleConfig::lrp0().with_gamma(LayerKind::Conv1d, -1.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn epsilon_must_be_positive() {
        let mut cfg = RuleConfig::lrp0();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plain_detection() {
        assert!(RuleConfig::plain().is_plain());
        assert!(RuleConfig::plain().with_gamma(LayerKind::Head, 0.0).is_plain());
        assert!(!RuleConfig::lrp0().is_plain());
    }

    #[test]
    fn parse_names() {
        assert_eq!("conv1d".parse::<LayerKind>().unwrap(), LayerKind::Conv1d);
        assert_eq!("detach-zb".parse::<GateMode>().unwrap(), GateMode::DetachGateZb);
        assert!("bogus".parse::<GateMode>().is_err());
    }
}
