// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explicit relevance propagation rules, applied layer by layer to the
//! values of a recorded forward pass.
//!
//! Every denominator is stabilized with a sign-matched ε (zero counts as
//! positive). With ε → 0 and γ = 0 this path reproduces Gradient×Input on
//! the detached model.

use crate::error::{Error, Result};
use crate::lrp::attribution::{check_class, AttributionMap};
use crate::lrp::rules::{GateMode, LayerKind, RuleConfig};
use crate::model::block::stabilize;
use crate::model::{BlockParams, BlockTrace, MambaModel};
use crate::tensor::Tensor;

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite relevance in {what}")))
    }
}

/// Share of input `i` in output `j` under the generalized γ-rule:
/// `x_i w_ij + γ (x_i w_ij)^±`, the sign chosen by the sign of `z_j`.
fn gamma_term(xw: f64, z_positive: bool, gamma: f64) -> f64 {
    let boost = if z_positive { xw.max(0.0) } else { xw.min(0.0) };
    xw + gamma * boost
}

/// Generalized LRP-γ through `y = x · w + b` for one row `x [K]`, `w [K, M]`.
///
/// The bias keeps its share of every output's relevance (it is absorbed).
/// With γ = 0 this is the LRP-0 (ε) rule.
pub fn gamma_linear(
    x: &[f64],
    w: &Tensor,
    bias: Option<&[f64]>,
    r_out: &[f64],
    gamma: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape()[0] != x.len() || w.shape()[1] != r_out.len() {
        return Err(Error::shape(
            "gamma_linear",
            format!("x [{}], w {:?}, relevance [{}]", x.len(), w.shape(), r_out.len()),
        ));
    }
    if bias.is_some_and(|b| b.len() != r_out.len()) {
        return Err(Error::shape("gamma_linear", "bias length does not match outputs"));
    }
    let (k, m) = (x.len(), r_out.len());
    let wd = w.data();
    let mut r_in = vec![0.0; k];
    for j in 0..m {
        let z: f64 = (0..k).map(|i| x[i] * wd[i * m + j]).sum();
        let pos = z > 0.0;
        let denom: f64 = (0..k).map(|i| gamma_term(x[i] * wd[i * m + j], pos, gamma)).sum::<f64>()
            + bias.map_or(0.0, |b| b[j]);
        let scale = r_out[j] / stabilize(denom, eps);
        for i in 0..k {
            r_in[i] += gamma_term(x[i] * wd[i * m + j], pos, gamma) * scale;
        }
    }
    finite(r_in, "gamma_linear")
}

/// Generalized LRP-γ through the causal depthwise convolution
/// `y[t,e] = Σ_k w[e,k] x[t−W+1+k, e] + b[e]`.
pub fn gamma_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    r_out: &Tensor,
    gamma: f64,
    eps: f64,
) -> Result<Tensor> {
    if x.rank() != 2 || r_out.shape() != x.shape() || w.rank() != 2 || w.shape()[0] != x.shape()[1] {
        return Err(Error::shape(
            "gamma_conv",
            format!("x {:?}, w {:?}, relevance {:?}", x.shape(), w.shape(), r_out.shape()),
        ));
    }
    let (l, e, width) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let (xd, wd) = (x.data(), w.data());
    let mut r_in = vec![0.0; l * e];
    for t in 0..l {
        for ch in 0..e {
            let taps: Vec<(usize, f64)> = (0..width)
                .filter_map(|k| {
                    let s = (t + k + 1).checked_sub(width)?;
                    Some((s, xd[s * e + ch] * wd[ch * width + k]))
                })
                .collect();
            let z: f64 = taps.iter().map(|(_, v)| v).sum();
            let pos = z > 0.0;
            let denom = taps.iter().map(|&(_, v)| gamma_term(v, pos, gamma)).sum::<f64>()
                + bias.map_or(0.0, |b| b[ch]);
            let scale = r_out.data()[t * e + ch] / stabilize(denom, eps);
            for &(s, v) in &taps {
                r_in[s * e + ch] += gamma_term(v, pos, gamma) * scale;
            }
        }
    }
    Tensor::new(vec![l, e], finite(r_in, "gamma_conv")?)
}

/// One step of the explicit state-space rule.
///
/// The step is `h_t[j] = Σ_i a[i,j] h_{t−1}[i] + Σ_i' b[i',j] x_t[i']` together
/// with the readout `y_{t−1}[k] = Σ_i c[i,k] h_{t−1}[i]`. Relevance of `h_t`
/// and `y_{t−1}` is split proportionally to the contributions, giving
/// `(R(h_{t−1}), R(x_t))`.
#[allow(clippy::too_many_arguments)]
pub fn explicit_ssm_rule(
    h_prev: &[f64],
    x_t: &[f64],
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    r_h: &[f64],
    r_y: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ni, nx, nj, nk) = (h_prev.len(), x_t.len(), r_h.len(), r_y.len());
    if a.shape() != [ni, nj] || b.shape() != [nx, nj] || c.shape() != [ni, nk] {
        return Err(Error::shape(
            "explicit_ssm_rule",
            format!(
                "h [{ni}], x [{nx}], a {:?}, b {:?}, c {:?}, R(h) [{nj}], R(y) [{nk}]",
                a.shape(),
                b.shape(),
                c.shape()
            ),
        ));
    }
    let (ad, bd, cd) = (a.data(), b.data(), c.data());
    let mut r_prev = vec![0.0; ni];
    let mut r_x = vec![0.0; nx];
    for k in 0..nk {
        let y: f64 = (0..ni).map(|i| h_prev[i] * cd[i * nk + k]).sum();
        let scale = r_y[k] / stabilize(y, eps);
        for i in 0..ni {
            r_prev[i] += h_prev[i] * cd[i * nk + k] * scale;
        }
    }
    for j in 0..nj {
        let from_h: f64 = (0..ni).map(|i| h_prev[i] * ad[i * nj + j]).sum();
        let from_x: f64 = (0..nx).map(|i| x_t[i] * bd[i * nj + j]).sum();
        let scale = r_h[j] / stabilize(from_h + from_x, eps);
        for i in 0..ni {
            r_prev[i] += h_prev[i] * ad[i * nj + j] * scale;
        }
        for i in 0..nx {
            r_x[i] += x_t[i] * bd[i * nj + j] * scale;
        }
    }
    Ok((finite(r_prev, "ssm state")?, finite(r_x, "ssm input")?))
}

/// Relevance of the two gate factors `(R(z_A), R(z_B))` for `y = z_A · z_B`.
///
/// `Off` is the unmodified gradient split, which hands the full relevance to
/// both factors.
pub fn explicit_gate_rule(r_out: &[f64], mode: GateMode) -> (Vec<f64>, Vec<f64>) {
    match mode {
        GateMode::Half => {
            let half: Vec<f64> = r_out.iter().map(|r| 0.5 * r).collect();
            (half.clone(), half)
        }
        GateMode::DetachGateZb => (r_out.to_vec(), vec![0.0; r_out.len()]),
        GateMode::Off => (r_out.to_vec(), r_out.to_vec()),
    }
}

/// Relevance of the scan input `x′ [L, E]` given relevance of the scan
/// output (including the D-skip) `[L, E]`.
///
/// Each channel is its own state-space system. Its input is appended to the
/// state, so the skip term becomes part of the readout:
/// `h′_t = (h_t, x_t)`, `a′ = blockdiag(ā_t, 0)`, `b′ = (b̄_t, 1)`,
/// `c′ = (C_t, D)`.
fn ssm_relevance(tr: &BlockTrace, d_skip: Option<&Tensor>, r_out: &Tensor, eps: f64) -> Result<Tensor> {
    let (l, e) = (tr.x_act.shape()[0], tr.x_act.shape()[1]);
    let n = tr.c.shape()[1];
    let m = n + 1;
    let x = tr.x_act.data();
    let mut r_x = vec![0.0; l * e];
    for ch in 0..e {
        let coeff = |t: usize, s: usize| ch * n + s + t * e * n;
        // Augmented states h′_t for t = 0..L.
        let mut states = Vec::with_capacity(l);
        let mut h = vec![0.0; n];
        for t in 0..l {
            for s in 0..n {
                h[s] = tr.a_bar.data()[coeff(t, s)] * h[s] + tr.b_bar.data()[coeff(t, s)] * x[t * e + ch];
            }
            let mut aug = h.clone();
            aug.push(x[t * e + ch]);
            states.push(aug);
        }
        let a_mat = |t: usize| {
            let mut a = Tensor::zeros(&[m, m]);
            for s in 0..n {
                a.data_mut()[s * m + s] = tr.a_bar.data()[coeff(t, s)];
            }
            a
        };
        let b_mat = |t: usize| {
            let mut b = Tensor::zeros(&[1, m]);
            for s in 0..n {
                b.data_mut()[s] = tr.b_bar.data()[coeff(t, s)];
            }
            b.data_mut()[n] = 1.0;
            b
        };
        let c_mat = |t: usize| {
            let mut c = Tensor::zeros(&[m, 1]);
            for s in 0..n {
                c.data_mut()[s] = tr.c.data()[t * n + s];
            }
            c.data_mut()[n] = d_skip.map_or(0.0, |d| d.data()[ch]);
            c
        };

        // Step t + 1 consumes R(h′_{t+1}) and R(y_t) and yields R(h′_t).
        let mut r_next = vec![0.0; m];
        for t in (0..l).rev() {
            let (x_next, a, b) = if t + 1 < l {
                (x[(t + 1) * e + ch], a_mat(t + 1), b_mat(t + 1))
            } else {
                (0.0, Tensor::zeros(&[m, m]), Tensor::zeros(&[1, m]))
            };
            let r_y = [r_out.data()[t * e + ch]];
            let (r_state, r_xn) =
                explicit_ssm_rule(&states[t], &[x_next], &a, &b, &c_mat(t), &r_next, &r_y, eps)?;
            if t + 1 < l {
                r_x[(t + 1) * e + ch] += r_xn[0];
            }
            r_next = r_state;
        }
        let zeros = vec![0.0; m];
        let (_, r_x0) = explicit_ssm_rule(
            &zeros,
            &[x[ch]],
            &a_mat(0),
            &b_mat(0),
            &Tensor::zeros(&[m, 1]),
            &r_next,
            &[0.0],
            eps,
        )?;
        r_x[ch] += r_x0[0];
    }
    Tensor::new(vec![l, e], r_x)
}

fn rows_gamma_linear(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    r_out: &Tensor,
    gamma: f64,
    eps: f64,
) -> Result<Tensor> {
    let l = x.shape()[0];
    let mut data = Vec::with_capacity(x.numel());
    for t in 0..l {
        data.extend(gamma_linear(
            x.row(t),
            w,
            bias.map(|b| b.data()),
            r_out.row(t),
            gamma,
            eps,
        )?);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Relevance of a block's (normalized) input given relevance of its output.
fn block_relevance(
    p: &BlockParams<Tensor>,
    tr: &BlockTrace,
    r_out: &Tensor,
    rules: &RuleConfig,
) -> Result<Tensor> {
    let eps = rules.epsilon;
    let gamma = |k: LayerKind| rules.gamma_for(k).unwrap_or(0.0);
    let r_gated = rows_gamma_linear(
        &tr.gated,
        &p.out_proj,
        p.out_proj_bias.as_ref(),
        r_out,
        gamma(LayerKind::OutProj),
        eps,
    )?;
    let (r_ssm, r_gate) = explicit_gate_rule(r_gated.data(), rules.gate);
    let shape = r_gated.shape().to_vec();
    let r_ssm = Tensor::new(shape.clone(), r_ssm)?;
    // SiLU layers pass relevance through unchanged.
    let r_gate_pre = Tensor::new(shape, r_gate)?;
    let r_conv = ssm_relevance(tr, p.d_skip.as_ref(), &r_ssm, eps)?;
    let r_xs = gamma_conv(
        &tr.xs,
        &p.conv_weight,
        p.conv_bias.as_ref().map(|b| b.data()),
        &r_conv,
        gamma(LayerKind::Conv1d),
        eps,
    )?;
    let (l, e) = (r_xs.shape()[0], r_xs.shape()[1]);
    let mut r_xz = Vec::with_capacity(2 * l * e);
    for t in 0..l {
        r_xz.extend_from_slice(r_xs.row(t));
        r_xz.extend_from_slice(r_gate_pre.row(t));
    }
    let r_xz = Tensor::new(vec![l, 2 * e], r_xz)?;
    rows_gamma_linear(
        &tr.input,
        &p.in_proj,
        p.in_proj_bias.as_ref(),
        &r_xz,
        gamma(LayerKind::InProj),
        eps,
    )
}

/// Splits `R(a + b)` between the summands in proportion to their values.
fn residual_split(a: &Tensor, b: &Tensor, r: &Tensor, eps: f64) -> (Tensor, Tensor) {
    let mut ra = r.clone();
    let mut rb = r.clone();
    for k in 0..r.numel() {
        let (av, bv) = (a.data()[k], b.data()[k]);
        let scale = r.data()[k] / stabilize(av + bv, eps);
        ra.data_mut()[k] = av * scale;
        rb.data_mut()[k] = bv * scale;
    }
    (ra, rb)
}

/// MambaLRP through the explicit rules instead of the detached gradient.
///
/// Requires the SiLU, SSM and RMSNorm rules; the gate may use any mode.
pub fn attribute_explicit(
    model: &MambaModel,
    tokens: &[usize],
    class: usize,
    rules: &RuleConfig,
) -> Result<AttributionMap> {
    rules.validate()?;
    if !(rules.silu_detach && rules.ssm_detach && rules.rmsnorm_detach) {
        return Err(Error::Config(
            "explicit rules need the SiLU, SSM and RMSNorm rules enabled".into(),
        ));
    }
    check_class(model, class)?;
    let x = model.embed(tokens)?;
    let trace = model.trace(&x, &RuleConfig::plain())?;
    let params = model.params();
    let cfg = model.config();
    let (l, d) = (tokens.len(), cfg.d_model);
    let eps = rules.epsilon;

    let output = trace.logits.data()[class];
    let mut r_logits = vec![0.0; cfg.num_classes];
    r_logits[class] = output;
    let r_last = gamma_linear(
        trace.last.data(),
        &params.head,
        params.head_bias.as_ref().map(|b| b.data()),
        &r_logits,
        rules.gamma_for(LayerKind::Head).unwrap_or(0.0),
        eps,
    )?;
    // Normalization with a constant denominator is elementwise linear, so
    // relevance passes through it unchanged.
    let mut r_h = Tensor::zeros(&[l, d]);
    r_h.data_mut()[(l - 1) * d..].copy_from_slice(&r_last);

    for (layer, bp) in trace.layers.iter().zip(&params.blocks).rev() {
        let (mut r_in, r_block) = residual_split(&layer.input, &layer.block.output, &r_h, eps);
        let r_normed = block_relevance(bp, &layer.block, &r_block, rules)?;
        r_in.add_assign(&r_normed);
        r_h = r_in;
    }
    let method = "mambalrp-explicit";
    AttributionMap::from_features(tokens.to_vec(), r_h, class, output, method, Some(rules.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::lrp::attribute_mambalrp;
    use crate::model::ModelConfig;

    #[test]
    fn gamma_zero_is_lrp0() {
        let x = [1.0, -2.0, 0.5];
        let w = Tensor::new(vec![3, 2], vec![0.3, -0.1, 0.2, 0.4, -0.5, 0.7]).unwrap();
        let r = gamma_linear(&x, &w, None, &[1.0, 2.0], 0.0, 1e-12).unwrap();
        let z = [0.3 - 0.4 - 0.25, -0.1 - 0.8 + 0.35];
        for i in 0..3 {
            let expected = x[i] * w.data()[i * 2] / z[0] + 2.0 * x[i] * w.data()[i * 2 + 1] / z[1];
            assert!((r[i] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_conserves_without_bias() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let w = Tensor::new(vec![4, 3], (0..12).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let r_out = [0.7, -1.3, 2.0];
        for gamma in [0.0, 0.25, 1.0, 10.0] {
            let r = gamma_linear(&x, &w, None, &r_out, gamma, 1e-12).unwrap();
            let total: f64 = r.iter().sum();
            assert!((total - r_out.iter().sum::<f64>()).abs() < 1e-9, "γ = {gamma}");
        }
    }

    #[test]
    fn gamma_with_positive_inputs_and_weights_matches_lrp0() {
        let x = [1.0, 2.0];
        let w = Tensor::new(vec![2, 1], vec![0.5, 0.25]).unwrap();
        let a = gamma_linear(&x, &w, None, &[3.0], 0.0, 1e-12).unwrap();
        let b = gamma_linear(&x, &w, None, &[3.0], 0.7, 1e-12).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_matches_detached_gradient_path() {
        // The γ-rule realized through the tape agrees with the explicit rule.
        let x = Tensor::vector(vec![0.8, -1.1, 0.3]);
        let w = Tensor::new(vec![3, 2], vec![0.4, -0.9, -0.6, 0.2, 0.5, 0.1]).unwrap();
        let b = Tensor::vector(vec![0.05, -0.02]);
        let rules = RuleConfig::lrp0().with_gamma(LayerKind::Head, 0.4);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = crate::model::block::linear(&mut tape, xv, wv, Some(bv), LayerKind::Head, &rules).unwrap();
        let yval = tape.value(y).clone();
        let seed = Tensor::vector(vec![1.0, -2.0]);
        let g = tape.backward_with_seed(y, seed.clone()).unwrap().wrt(xv);
        let r_out: Vec<f64> = yval.data().iter().zip(seed.data()).map(|(y, s)| y * s).collect();
        let explicit = gamma_linear(x.data(), &w, Some(b.data()), &r_out, 0.4, rules.epsilon).unwrap();
        for i in 0..3 {
            assert!((g.data()[i] * x.data()[i] - explicit[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ssm_rule_single_step_from_zero_state() {
        let a = Tensor::new(vec![2, 2], vec![0.9, 0.0, 0.0, 0.8]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.5, -0.3]).unwrap();
        let c = Tensor::zeros(&[2, 1]);
        let (rh, rx) = explicit_ssm_rule(&[0.0, 0.0], &[2.0], &a, &b, &c, &[1.5, -0.5], &[0.0], 1e-9).unwrap();
        assert_eq!(rh, vec![0.0, 0.0]);
        assert!((rx[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ssm_rule_is_linear_in_relevance() {
        let a = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.5, -0.3]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![0.4, 0.6]).unwrap();
        let (rh, rx) = explicit_ssm_rule(&[0.3, -0.7], &[2.0], &a, &b, &c, &[0.0, 0.0], &[0.0], 1e-9).unwrap();
        assert!(rh.iter().chain(&rx).all(|&v| v == 0.0));
    }

    #[test]
    fn gate_rules() {
        assert_eq!(
            explicit_gate_rule(&[2.0, -4.0], GateMode::Half),
            (vec![1.0, -2.0], vec![1.0, -2.0])
        );
        assert_eq!(
            explicit_gate_rule(&[2.0, -4.0], GateMode::DetachGateZb),
            (vec![2.0, -4.0], vec![0.0, 0.0])
        );
    }

    #[test]
    fn scalar_chain_matches_detached_path() {
        let cfg = ModelConfig {
            vocab_size: 6,
            num_blocks: 1,
            d_model: 1,
            d_inner: 1,
            d_state: 1,
            conv_width: 2,
            num_classes: 2,
            use_bias: false,
            use_d_skip: false,
        };
        let m = MambaModel::new(cfg, 11).unwrap();
        let tokens = [1, 4, 2];
        let rules = RuleConfig::lrp0();
        let a = attribute_explicit(&m, &tokens, 0, &rules).unwrap();
        let b = attribute_mambalrp(&m, &tokens, 0, &rules).unwrap();
        assert!(a.feature_relevance.max_abs_diff(&b.feature_relevance) < 1e-6);
    }

    #[test]
    fn explicit_path_matches_detached_path_on_toy_models() {
        for seed in 0..6 {
            let mut cfg = ModelConfig::small(12, 3);
            cfg.d_model = 3;
            cfg.d_inner = 4;
            cfg.d_state = 3;
            cfg.num_blocks = 2;
            cfg.use_bias = seed % 2 == 0;
            let m = MambaModel::new(cfg, seed).unwrap();
            let tokens = [3, 1, 7, 5, 11];
            for gate in [GateMode::Half, GateMode::DetachGateZb] {
                let rules = RuleConfig {
                    gate,
                    ..RuleConfig::lrp0()
                };
                let a = attribute_explicit(&m, &tokens, 1, &rules).unwrap();
                let b = attribute_mambalrp(&m, &tokens, 1, &rules).unwrap();
                let diff = a.feature_relevance.max_abs_diff(&b.feature_relevance);
                assert!(diff < 1e-5, "seed {seed}: {diff}");
            }
        }
    }

    #[test]
    fn explicit_path_rejects_incomplete_rules() {
        let m = MambaModel::new(ModelConfig::small(5, 2), 0).unwrap();
        let rules = RuleConfig {
            ssm_detach: false,
            ..RuleConfig::lrp0()
        };
        assert!(matches!(attribute_explicit(&m, &[1, 2], 0, &rules), Err(Error::Config(_))));
    }
}
