// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relevance propagation for Mamba models.
//!
//! Two routes produce the same relevance: Gradient×Input on a forward pass
//! with stop-gradients inserted by the active [`RuleConfig`]
//! ([`attribute_mambalrp`]), and explicit layer-by-layer rules applied to
//! recorded forward values ([`attribute_explicit`]).

mod attribution;
mod explicit;
mod propositions;
mod rules;

pub use attribution::{attribute_mambalrp, input_gradient, AttributionMap, Explainable};
pub(crate) use attribution::{check_class, gradient_times_input};
pub use explicit::{
    attribute_explicit, explicit_gate_rule, explicit_ssm_rule, gamma_conv, gamma_linear,
};
pub use propositions::{verify_proposition_residuals, ToyLayer, SSM_TOY_CHANNELS, SSM_TOY_STATE};
pub use rules::{GateMode, LayerKind, RuleConfig, DEFAULT_CONV_GAMMA, DEFAULT_EPSILON};
