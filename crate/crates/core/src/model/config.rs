// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural hyperparameters of a stacked Mamba classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_blocks: usize,
    /// Hidden (residual stream) width D.
    pub d_model: usize,
    /// Expanded width E of the SSM branch.
    pub d_inner: usize,
    /// SSM state size N.
    pub d_state: usize,
    pub conv_width: usize,
    pub num_classes: usize,
    /// Biases on in/out projections, convolution and head.
    pub use_bias: bool,
    pub use_d_skip: bool,
}

impl ModelConfig {
    /// A small default shape used throughout the tests and the CLI.
    pub fn small(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            num_blocks: 1,
            d_model: 16,
            d_inner: 32,
            d_state: 8,
            conv_width: 4,
            num_classes,
            use_bias: true,
            use_d_skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("num_blocks", self.num_blocks),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("conv_width", self.conv_width),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_inner < self.d_model {
            return Err(Error::Config(format!(
                "d_inner ({}) must be >= d_model ({})",
                self.d_inner, self.d_model
            )));
        }
        Ok(())
    }

    /// Canonical `key = value` text, one line per field in declaration
    /// order. The same bytes are embedded in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "vocab_size = {}\nnum_blocks = {}\nd_model = {}\nd_inner = {}\nd_state = {}\n\
             conv_width = {}\nnum_classes = {}\nuse_bias = {}\nuse_d_skip = {}\n",
            self.vocab_size,
            self.num_blocks,
            self.d_model,
            self.d_inner,
            self.d_state,
            self.conv_width,
            self.num_classes,
            self.use_bias,
            self.use_d_skip
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Format(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::small(40, 3);
        cfg.use_bias = false;
        let text = cfg.to_text();
        assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
        assert!(text.starts_with("vocab_size = 40\n"));
    }

    #[test]
    fn rejects_bad_dims() {
        let mut cfg = ModelConfig::small(10, 2);
        cfg.d_inner = 8;
        assert!(cfg.validate().is_err());
        cfg.d_inner = 32;
        cfg.conv_width = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = ModelConfig::small(10, 2).to_text() + "extra = 1\n";
        assert!(matches!(ModelConfig::from_text(&text), Err(Error::Format(_))));
    }
}
