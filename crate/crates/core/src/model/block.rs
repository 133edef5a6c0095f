// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layers of the Mamba block, recorded on a [`Tape`].
//!
//! Every layer takes the active [`RuleConfig`] and inserts stop-gradients
//! where the rules ask for them. The inserted nodes never change a forward
//! value, so a pass under any rule set is bit-identical to the plain pass.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lrp::{GateMode, LayerKind, RuleConfig};
use crate::model::params::BlockParams;
use crate::tensor::Tensor;

/// Additive constant under the square root of RMSNorm.
pub const RMS_EPS: f64 = 1e-6;

/// `x + ε` for non-negative `x`, `x − ε` otherwise.
pub fn stabilize(x: f64, eps: f64) -> f64 {
    if x >= 0.0 {
        x + eps
    } else {
        x - eps
    }
}

/// `x · σ(x)`; with the SiLU rule the sigmoid factor is a constant.
pub fn silu(tape: &mut Tape, x: Var, rules: &RuleConfig) -> Result<Var> {
    let mut s = tape.sigmoid(x)?;
    if rules.silu_detach {
        s = tape.detach(s)?;
    }
    tape.mul(x, s)
}

/// `x · scale / sqrt(mean(x²) + RMS_EPS)` over the last axis; with the
/// RMSNorm rule the reciprocal root is a constant.
pub fn rms_norm(tape: &mut Tape, x: Var, scale: Var, rules: &RuleConfig) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ms = tape.mean_last(sq)?;
    let shifted = tape.add_scalar(ms, RMS_EPS)?;
    let mut inv = tape.powf(shifted, -0.5)?;
    if rules.rmsnorm_detach {
        inv = tape.detach(inv)?;
    }
    let normed = tape.scale_rows(x, inv)?;
    tape.mul(normed, scale)
}

/// A bias-free map from input to pre-activation, linear in both arguments.
type LinearMap = fn(&mut Tape, Var, Var) -> Result<Var>;

fn matmul_map(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    tape.matmul(x, w)
}

fn conv_map(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    tape.causal_conv(x, w)
}

fn const_like(tape: &mut Tape, v: Var, f: impl Fn(f64) -> f64) -> Var {
    let t = tape.value(v).map(f);
    tape.leaf(t)
}

/// `map(x, w) + b`, optionally with the generalized γ-rule.
///
/// With γ the output is rewritten as `[y]cst + s ⊙ (z_γ − [z_γ]cst)` where
/// `z_γ` is the γ-weighted pre-activation and `s = y / (z_γ + b)` is held
/// constant. The value is unchanged while the gradient, multiplied by the
/// input, yields the γ-rule redistribution of `y`'s relevance.
fn affine(
    tape: &mut Tape,
    map: LinearMap,
    x: Var,
    w: Var,
    b: Option<Var>,
    gamma: Option<f64>,
    eps: f64,
) -> Result<Var> {
    let z = map(tape, x, w)?;
    let y = match b {
        Some(b) => tape.add(z, b)?,
        None => z,
    };
    let Some(gamma) = gamma else { return Ok(y) };

    let x_pos_mask = const_like(tape, x, |v| if v > 0.0 { 1.0 } else { 0.0 });
    let x_neg_mask = const_like(tape, x, |v| if v < 0.0 { 1.0 } else { 0.0 });
    let x_pos = tape.mul(x, x_pos_mask)?;
    let x_neg = tape.mul(x, x_neg_mask)?;
    let w_pos = const_like(tape, w, |v| v.max(0.0));
    let w_neg = const_like(tape, w, |v| v.min(0.0));
    let w_const = const_like(tape, w, |v| v);

    // Same-sign products x⁺w⁺ + x⁻w⁻ and opposite-sign x⁺w⁻ + x⁻w⁺.
    let pp = map(tape, x_pos, w_pos)?;
    let nn = map(tape, x_neg, w_neg)?;
    let same = tape.add(pp, nn)?;
    let pn = map(tape, x_pos, w_neg)?;
    let np = map(tape, x_neg, w_pos)?;
    let opposite = tape.add(pn, np)?;

    let z_out_pos = const_like(tape, z, |v| if v > 0.0 { 1.0 } else { 0.0 });
    let z_out_neg = const_like(tape, z, |v| if v > 0.0 { 0.0 } else { 1.0 });
    let picked_same = tape.mul(same, z_out_pos)?;
    let picked_opp = tape.mul(opposite, z_out_neg)?;
    let boost = tape.add(picked_same, picked_opp)?;
    let boost = tape.scale(boost, gamma)?;
    let base = map(tape, x, w_const)?;
    let z_gamma = tape.add(base, boost)?;

    let zg = tape.value(z_gamma).clone();
    let yv = tape.value(y).clone();
    let bias = b.map(|b| tape.value(b).clone());
    let ratio = ratio_with_bias(&yv, &zg, bias.as_ref(), eps)?;
    let s = tape.leaf(ratio);

    let y_const = tape.detach(y)?;
    let zg_const = tape.detach(z_gamma)?;
    let delta = tape.sub(z_gamma, zg_const)?;
    let carried = tape.mul(s, delta)?;
    tape.add(y_const, carried)
}

/// `y / stab(z_γ + b)` elementwise, `b` broadcast over leading axes.
fn ratio_with_bias(y: &Tensor, z_gamma: &Tensor, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let m = z_gamma.last_dim();
    let data = y
        .data()
        .iter()
        .zip(z_gamma.data())
        .enumerate()
        .map(|(k, (&yv, &zv))| {
            let b = bias.map_or(0.0, |b| b.data()[k % m]);
            yv / stabilize(zv + b, eps)
        })
        .collect();
    Tensor::checked(y.shape().to_vec(), data)
}

/// Dense layer `x · w + b` for layer family `kind`.
pub fn linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    kind: LayerKind,
    rules: &RuleConfig,
) -> Result<Var> {
    affine(tape, matmul_map, x, w, b, rules.gamma_for(kind), rules.epsilon)
}

/// Causal depthwise convolution plus per-channel bias.
pub fn conv1d(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, rules: &RuleConfig) -> Result<Var> {
    affine(
        tape,
        conv_map,
        x,
        w,
        b,
        rules.gamma_for(LayerKind::Conv1d),
        rules.epsilon,
    )
}

/// Zero-order hold for A and Euler for B:
/// `ā[l,e,n] = exp(Δ[l,e]·A[e,n])`, `b̄[l,e,n] = Δ[l,e]·B[l,n]`.
///
/// Shapes: `delta [L, E]`, `a [E, N]`, `b [L, N]`.
pub fn discretize(tape: &mut Tape, delta: Var, a: Var, b: Var) -> Result<(Var, Var)> {
    let (dv, av, bv) = (tape.value(delta), tape.value(a), tape.value(b));
    if dv.rank() != 2 || av.rank() != 2 || bv.rank() != 2 {
        return Err(Error::shape(
            "discretize",
            format!("delta {:?}, a {:?}, b {:?}", dv.shape(), av.shape(), bv.shape()),
        ));
    }
    let (l, e, n) = (dv.shape()[0], dv.shape()[1], av.shape()[1]);
    if av.shape()[0] != e || bv.shape() != [l, n] {
        return Err(Error::shape(
            "discretize",
            format!("delta {:?}, a {:?}, b {:?}", dv.shape(), av.shape(), bv.shape()),
        ));
    }
    let d3 = tape.expand(delta, 2, n)?;
    let da = tape.mul(d3, a)?;
    let a_bar = tape.exp(da)?;
    let b3 = tape.expand(b, 1, e)?;
    let b_bar = tape.mul(d3, b3)?;
    Ok((a_bar, b_bar))
}

/// Handles to every intermediate of one block pass.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub input: Var,
    /// SSM branch of the input projection, before the convolution.
    pub xs: Var,
    /// Gate branch of the input projection, before its SiLU.
    pub gate_pre: Var,
    /// Convolution output before SiLU.
    pub conv: Var,
    /// x′ = SiLU(conv).
    pub x_act: Var,
    pub delta: Var,
    pub a_bar: Var,
    pub b_bar: Var,
    pub c: Var,
    /// Scan output including the D-skip term.
    pub ssm_out: Var,
    /// SiLU of the gate branch.
    pub gate: Var,
    pub gated: Var,
    pub output: Var,
}

/// Forward values of every intermediate of one block pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub input: Tensor,
    pub xs: Tensor,
    pub gate_pre: Tensor,
    pub conv: Tensor,
    pub x_act: Tensor,
    pub delta: Tensor,
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub c: Tensor,
    pub ssm_out: Tensor,
    pub gate: Tensor,
    pub gated: Tensor,
    pub output: Tensor,
}

impl BlockVars {
    pub fn trace(&self, tape: &Tape) -> BlockTrace {
        let v = |x: Var| tape.value(x).clone();
        BlockTrace {
            input: v(self.input),
            xs: v(self.xs),
            gate_pre: v(self.gate_pre),
            conv: v(self.conv),
            x_act: v(self.x_act),
            delta: v(self.delta),
            a_bar: v(self.a_bar),
            b_bar: v(self.b_bar),
            c: v(self.c),
            ssm_out: v(self.ssm_out),
            gate: v(self.gate),
            gated: v(self.gated),
            output: v(self.output),
        }
    }
}

/// One Mamba block applied to `x [L, D]`, producing `[L, D]`.
pub fn mamba_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams<Var>,
    rules: &RuleConfig,
) -> Result<BlockVars> {
    let xv = tape.value(x);
    if xv.rank() != 2 {
        return Err(Error::shape(
            "mamba_block",
            format!("input must be [L, D], got {:?}", xv.shape()),
        ));
    }
    let e = tape.value(p.conv_weight).shape()[0];

    let xz = linear(tape, x, p.in_proj, p.in_proj_bias, LayerKind::InProj, rules)?;
    let xs = tape.slice(xz, 1, 0, e)?;
    let gate_pre = tape.slice(xz, 1, e, e)?;

    let conv = conv1d(tape, xs, p.conv_weight, p.conv_bias, rules)?;
    let x_act = silu(tape, conv, rules)?;

    let b = tape.matmul(x_act, p.x_proj_b)?;
    let c = tape.matmul(x_act, p.x_proj_c)?;
    let dt = tape.matmul(x_act, p.dt_proj)?;
    let dt = tape.add(dt, p.dt_bias)?;
    let delta = tape.softplus(dt)?;
    let a_exp = tape.exp(p.a_log)?;
    let a = tape.scale(a_exp, -1.0)?;
    let (mut a_bar, mut b_bar) = discretize(tape, delta, a, b)?;
    let mut c_used = c;
    if rules.ssm_detach {
        a_bar = tape.detach(a_bar)?;
        b_bar = tape.detach(b_bar)?;
        c_used = tape.detach(c)?;
    }
    let mut ssm_out = tape.selective_scan(a_bar, b_bar, c_used, x_act)?;
    if let Some(d) = p.d_skip {
        let skip = tape.mul(x_act, d)?;
        ssm_out = tape.add(ssm_out, skip)?;
    }

    let gate = silu(tape, gate_pre, rules)?;
    let gated = gate_product(tape, ssm_out, gate, rules.gate)?;
    let output = linear(tape, gated, p.out_proj, p.out_proj_bias, LayerKind::OutProj, rules)?;

    Ok(BlockVars {
        input: x,
        xs,
        gate_pre,
        conv,
        x_act,
        delta,
        a_bar,
        b_bar,
        c: c_used,
        ssm_out,
        gate,
        gated,
        output,
    })
}

/// Multiplicative gate `z_A · z_B` under the selected relevance mode.
pub fn gate_product(tape: &mut Tape, za: Var, zb: Var, mode: GateMode) -> Result<Var> {
    match mode {
        GateMode::Off => tape.mul(za, zb),
        GateMode::DetachGateZb => {
            let zb = tape.detach(zb)?;
            tape.mul(za, zb)
        }
        GateMode::Half => {
            let p = tape.mul(za, zb)?;
            let pc = tape.detach(p)?;
            let h1 = tape.scale(p, 0.5)?;
            let h2 = tape.scale(pc, 0.5)?;
            tape.add(h1, h2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid, softplus};
    use crate::model::config::ModelConfig;
    use crate::model::params::MambaParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block_leaves(tape: &mut Tape, p: &BlockParams<Tensor>) -> BlockParams<Var> {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        BlockParams {
            norm_scale: leaf(&p.norm_scale),
            in_proj: leaf(&p.in_proj),
            in_proj_bias: p.in_proj_bias.as_ref().map(&mut leaf),
            conv_weight: leaf(&p.conv_weight),
            conv_bias: p.conv_bias.as_ref().map(&mut leaf),
            x_proj_b: leaf(&p.x_proj_b),
            x_proj_c: leaf(&p.x_proj_c),
            dt_proj: leaf(&p.dt_proj),
            dt_bias: leaf(&p.dt_bias),
            a_log: leaf(&p.a_log),
            d_skip: p.d_skip.as_ref().map(&mut leaf),
            out_proj: leaf(&p.out_proj),
            out_proj_bias: p.out_proj_bias.as_ref().map(&mut leaf),
        }
    }

    fn randomized_block(cfg: &ModelConfig, seed: u64) -> BlockParams<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MambaParams::init(cfg, seed).unwrap();
        let mut b = p.blocks[0].clone();
        // Non-trivial biases and state matrix.
        for t in [&mut b.a_log, &mut b.dt_bias]
            .into_iter()
            .chain(b.in_proj_bias.as_mut())
            .chain(b.conv_bias.as_mut())
            .chain(b.out_proj_bias.as_mut())
        {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        b
    }

    fn mat(x: &[f64], rows: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            for j in 0..m {
                out[r * m + j] = (0..k).map(|i| x[r * k + i] * w[i * m + j]).sum();
            }
        }
        out
    }

    /// Straight-line loop implementation used as an oracle.
    fn reference_block(x: &Tensor, p: &BlockParams<Tensor>) -> Vec<f64> {
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let (e, w) = (p.conv_weight.shape()[0], p.conv_weight.shape()[1]);
        let n = p.x_proj_b.shape()[1];
        let silu = |v: f64| v * sigmoid(v);
        let mut xz = mat(x.data(), l, d, p.in_proj.data(), 2 * e);
        if let Some(bias) = &p.in_proj_bias {
            for r in 0..l {
                for j in 0..2 * e {
                    xz[r * 2 * e + j] += bias.data()[j];
                }
            }
        }
        let mut xa = vec![0.0; l * e];
        for t in 0..l {
            for ch in 0..e {
                let mut acc = p.conv_bias.as_ref().map_or(0.0, |b| b.data()[ch]);
                for k in 0..w {
                    // kernel tap k multiplies input at t - (w-1) + k
                    let src = t as isize - (w as isize - 1) + k as isize;
                    if src >= 0 {
                        acc += p.conv_weight.data()[ch * w + k] * xz[src as usize * 2 * e + ch];
                    }
                }
                xa[t * e + ch] = silu(acc);
            }
        }
        let bm = mat(&xa, l, e, p.x_proj_b.data(), n);
        let cm = mat(&xa, l, e, p.x_proj_c.data(), n);
        let dt = mat(&xa, l, e, p.dt_proj.data(), e);
        let mut h = vec![0.0; e * n];
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let mut gated = vec![0.0; e];
            for ch in 0..e {
                let delta = softplus(dt[t * e + ch] + p.dt_bias.data()[ch]);
                let mut y = 0.0;
                for s in 0..n {
                    let a = -p.a_log.data()[ch * n + s].exp();
                    let idx = ch * n + s;
                    h[idx] = (delta * a).exp() * h[idx] + delta * bm[t * n + s] * xa[t * e + ch];
                    y += cm[t * n + s] * h[idx];
                }
                if let Some(dsk) = &p.d_skip {
                    y += dsk.data()[ch] * xa[t * e + ch];
                }
                gated[ch] = y * silu(xz[t * 2 * e + e + ch]);
            }
            for j in 0..d {
                let mut acc = p.out_proj_bias.as_ref().map_or(0.0, |b| b.data()[j]);
                for ch in 0..e {
                    acc += gated[ch] * p.out_proj.data()[ch * d + j];
                }
                out[t * d + j] = acc;
            }
        }
        out
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            num_blocks: 1,
            d_model: 3,
            d_inner: 4,
            d_state: 3,
            conv_width: 3,
            num_classes: 2,
            use_bias: true,
            use_d_skip: true,
        }
    }

    fn run_block(x: &Tensor, p: &BlockParams<Tensor>, rules: &RuleConfig) -> (Tensor, BlockTrace) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = block_leaves(&mut tape, p);
        let vars = mamba_block(&mut tape, xv, &pv, rules).unwrap();
        (tape.value(vars.output).clone(), vars.trace(&tape))
    }

    #[test]
    fn discretize_closed_form() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let a = tape.leaf(Tensor::new(vec![1, 1], vec![-1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let (ab, bb) = discretize(&mut tape, d, a, b).unwrap();
        assert!((tape.value(ab).data()[0] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(tape.value(bb).data()[0], 2.0);

        let d = tape.leaf(Tensor::new(vec![2, 1], vec![1e-12, 3.0]).unwrap());
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let (ab, bb) = discretize(&mut tape, d, a, b).unwrap();
        let ab = tape.value(ab).data();
        assert!((ab[0] - 1.0).abs() < 1e-11 && tape.value(bb).data()[0] < 1e-11);
        assert_eq!(ab[1], 1.0);
        assert_eq!(ab[3], 1.0);
    }

    #[test]
    fn block_matches_straight_line_reference() {
        let cfg = small_cfg();
        for seed in 0..5 {
            let p = randomized_block(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random(&[5, cfg.d_model], &mut rng);
            let (out, _) = run_block(&x, &p, &RuleConfig::plain());
            let reference = reference_block(&x, &p);
            for (a, b) in out.data().iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rules_do_not_change_forward_values() {
        let cfg = small_cfg();
        let p = randomized_block(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[6, cfg.d_model], &mut rng);
        let (plain, plain_trace) = run_block(&x, &p, &RuleConfig::plain());
        let gamma_all = RuleConfig::lrp0()
            .with_gamma(LayerKind::InProj, 0.3)
            .with_gamma(LayerKind::Conv1d, 0.25)
            .with_gamma(LayerKind::OutProj, 1.0);
        for rules in [
            RuleConfig::default(),
            RuleConfig::lrp0(),
            gamma_all,
            RuleConfig {
                gate: GateMode::DetachGateZb,
                ..RuleConfig::lrp0()
            },
        ] {
            let (out, trace) = run_block(&x, &p, &rules);
            assert_eq!(out.data(), plain.data());
            assert_eq!(trace, plain_trace);
        }
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let mut cfg = small_cfg();
        cfg.use_bias = false;
        let p = MambaParams::init(&cfg, 1).unwrap();
        let x = Tensor::zeros(&[4, cfg.d_model]);
        let (out, trace) = run_block(&x, &p.blocks[0], &RuleConfig::plain());
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(trace.a_bar.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn block_input_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let p = randomized_block(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[4, cfg.d_model], &mut rng);
        let weights = random(&[4, cfg.d_model], &mut rng);
        let err = grad_check(
            |tape, x| {
                let pv = block_leaves(tape, &p);
                let out = mamba_block(tape, x, &pv, &RuleConfig::plain())?.output;
                let w = tape.leaf(weights.clone());
                let prod = tape.mul(out, w)?;
                tape.sum(prod)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gamma_affine_redistributes_with_amplified_same_sign_terms() {
        // Positive inputs and weights: every contribution is scaled by 1+γ
        // in numerator and denominator, so the split matches LRP-0.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, 0.25]).unwrap());
        let rules = RuleConfig::lrp0().with_gamma(LayerKind::Head, 0.5);
        let y = linear(&mut tape, x, w, None, LayerKind::Head, &rules).unwrap();
        let out = tape.sum(y).unwrap();
        let g = tape.backward(out).unwrap().wrt(x);
        let r: Vec<f64> = g.data().iter().zip([1.0, 2.0]).map(|(g, x)| g * x).collect();
        assert!((r[0] - 0.5).abs() < 1e-8 && (r[1] - 0.5).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn rms_norm_of_constant_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![2.0; 4]).unwrap());
        let s = tape.leaf(Tensor::vector(vec![1.0, 2.0, 1.0, 1.0]));
        let y = rms_norm(&mut tape, x, s, &RuleConfig::plain()).unwrap();
        let expected = 2.0 / (4.0 + RMS_EPS).sqrt();
        let yv = tape.value(y).data();
        assert!((yv[0] - expected).abs() < 1e-15);
        assert!((yv[1] - 2.0 * expected).abs() < 1e-15);
    }
}
