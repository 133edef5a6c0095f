// SPDX-License-Identifier: MIT OR Apache-2.0

//! Standalone layers on which plain Gradient×Input breaks conservation,
//! with the closed-form residual each one leaks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Channel count of the state-space toy layer.
pub const SSM_TOY_CHANNELS: usize = 3;
/// State size of the state-space toy layer.
pub const SSM_TOY_STATE: usize = 2;
const SSM_TOY_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyLayer {
    /// `y = SiLU(x)` with `f = Σ y`.
    Silu,
    /// One selective state-space step. The input is the previous state
    /// `h [E·N]` followed by the step input `x [E]`.
    SsmStep,
    /// `y = z_A ⊙ z_B` with `z_A`, `z_B` the two halves of the input and
    /// `f = Σ y`.
    Gate,
}

impl FromStr for ToyLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(ToyLayer::Silu),
            "ssm-step" => Ok(ToyLayer::SsmStep),
            "gate" => Ok(ToyLayer::Gate),
            other => Err(Error::Config(format!("unknown toy layer `{other}`"))),
        }
    }
}

impl fmt::Display for ToyLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyLayer::Silu => "silu",
            ToyLayer::SsmStep => "ssm-step",
            ToyLayer::Gate => "gate",
        })
    }
}

/// Fixed parameters of the state-space toy step.
///
/// With `h` the previous state and `x` the step input:
/// `Δ_e = softplus(w_e x_e + β_e)`, `ā = exp(Δ A)`, `B = x · W_B`,
/// `b̄ = Δ B`, `c_n = Σ_e W_C[e,n] h[e,n]`, `h′ = ā ⊙ h + b̄ ⊙ x`,
/// `y_e = Σ_n c_n h[e,n]`, and `f = Σ v ⊙ h′ + Σ u ⊙ y`.
struct SsmToy {
    a: Vec<f64>,
    w_delta: Vec<f64>,
    b_delta: Vec<f64>,
    w_b: Vec<f64>,
    w_c: Vec<f64>,
    v: Vec<f64>,
    u: Vec<f64>,
}

impl SsmToy {
    fn new() -> Self {
        let (e, n) = (SSM_TOY_CHANNELS, SSM_TOY_STATE);
        let mut rng = stream_rng(SSM_TOY_SEED, 0);
        let mut draw = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        Self {
            a: draw(e * n, -1.5, -0.2),
            w_delta: draw(e, -1.0, 1.0),
            b_delta: draw(e, -1.0, 1.0),
            w_b: draw(e * n, -1.0, 1.0),
            w_c: draw(e * n, -1.0, 1.0),
            v: draw(e * n, -1.0, 1.0),
            u: draw(e, -1.0, 1.0),
        }
    }

    /// Records `f` on the tape and returns `(f, R(h′) + R(y))` pieces.
    fn record(&self, tape: &mut Tape, h: Var, x: Var) -> Result<(Var, Var, Var)> {
        let (e, n) = (SSM_TOY_CHANNELS, SSM_TOY_STATE);
        let leaf = |tape: &mut Tape, shape: &[usize], d: &[f64]| -> Result<Var> {
            Ok(tape.leaf(Tensor::new(shape.to_vec(), d.to_vec())?))
        };
        let w_delta = leaf(tape, &[e], &self.w_delta)?;
        let b_delta = leaf(tape, &[e], &self.b_delta)?;
        let a = leaf(tape, &[e, n], &self.a)?;
        let w_b = leaf(tape, &[e, n], &self.w_b)?;
        let w_c = leaf(tape, &[e, n], &self.w_c)?;
        let v = leaf(tape, &[e, n], &self.v)?;
        let u = leaf(tape, &[e], &self.u)?;

        let pre = tape.mul(x, w_delta)?;
        let pre = tape.add(pre, b_delta)?;
        let delta = tape.softplus(pre)?;
        let delta3 = tape.expand(delta, 1, n)?;
        let da = tape.mul(delta3, a)?;
        let a_bar = tape.exp(da)?;
        let bvec = tape.matmul(x, w_b)?;
        let bvec2 = tape.expand(bvec, 0, e)?;
        let b_bar = tape.mul(delta3, bvec2)?;
        let x2 = tape.expand(x, 1, n)?;
        let carry = tape.mul(a_bar, h)?;
        let drive = tape.mul(b_bar, x2)?;
        let h_next = tape.add(carry, drive)?;

        let hc = tape.mul(h, w_c)?;
        let ones = tape.leaf(Tensor::full(&[1, e], 1.0));
        let c = tape.matmul(ones, hc)?;
        let c = tape.reshape(c, vec![n])?;
        let y = tape.matmul(h, c)?;

        let fv = tape.mul(h_next, v)?;
        let fv = tape.sum(fv)?;
        let fu = tape.mul(y, u)?;
        let fu = tape.sum(fu)?;
        let f = tape.add(fv, fu)?;
        Ok((f, h_next, y))
    }

    /// Directional derivative of `f` through θ only, along `(h, x)` itself.
    fn analytic(&self, h: &[f64], x: &[f64]) -> f64 {
        let (e, n) = (SSM_TOY_CHANNELS, SSM_TOY_STATE);
        let bvec: Vec<f64> = (0..n)
            .map(|s| (0..e).map(|i| x[i] * self.w_b[i * n + s]).sum())
            .collect();
        let c: Vec<f64> = (0..n)
            .map(|s| (0..e).map(|i| self.w_c[i * n + s] * h[i * n + s]).sum())
            .collect();
        let mut eps = 0.0;
        for i in 0..e {
            let pre = self.w_delta[i] * x[i] + self.b_delta[i];
            let delta = softplus(pre);
            let d_delta = sigmoid(pre) * self.w_delta[i] * x[i];
            for s in 0..n {
                let k = i * n + s;
                let a_bar = (delta * self.a[k]).exp();
                let d_a_bar = a_bar * self.a[k] * d_delta;
                // B is linear in x, so its derivative along x is B itself.
                let d_b_bar = d_delta * bvec[s] + delta * bvec[s];
                eps += self.v[k] * h[k] * d_a_bar + self.v[k] * x[i] * d_b_bar;
            }
        }
        // c is linear in h, so its derivative along h is c itself.
        for s in 0..n {
            let weight: f64 = (0..e).map(|i| self.u[i] * h[i * n + s]).sum();
            eps += weight * c[s];
        }
        eps
    }
}

/// `(measured, analytic)` non-conservation of a plain-gradient toy layer.
///
/// `measured` is `Σ R(input) − Σ R(output)` from autodiff Gradient×Input;
/// `analytic` is the closed-form residual for the layer.
pub fn verify_proposition_residuals(kind: ToyLayer, x: &Tensor) -> Result<(f64, f64)> {
    let xs = x.data();
    match kind {
        ToyLayer::Silu => {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::vector(xs.to_vec()));
            let s = tape.sigmoid(xv)?;
            let y = tape.mul(xv, s)?;
            let f = tape.sum(y)?;
            let g = tape.backward(f)?.wrt(xv);
            let r_x: f64 = g.data().iter().zip(xs).map(|(g, x)| g * x).sum();
            let r_y = tape.value(y).sum();
            let analytic = xs
                .iter()
                .map(|&v| {
                    let s = sigmoid(v);
                    s * (1.0 - s) * v * v
                })
                .sum();
            Ok((r_x - r_y, analytic))
        }
        ToyLayer::Gate => {
            if xs.len() % 2 != 0 || xs.is_empty() {
                return Err(Error::shape("gate toy", "input must have even, non-zero length"));
            }
            let half = xs.len() / 2;
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::vector(xs.to_vec()));
            let za = tape.slice(xv, 0, 0, half)?;
            let zb = tape.slice(xv, 0, half, half)?;
            let y = tape.mul(za, zb)?;
            let f = tape.sum(y)?;
            let g = tape.backward(f)?.wrt(xv);
            let r_x: f64 = g.data().iter().zip(xs).map(|(g, x)| g * x).sum();
            let r_y = tape.value(y).sum();
            Ok((r_x - r_y, r_y))
        }
        ToyLayer::SsmStep => {
            let (e, n) = (SSM_TOY_CHANNELS, SSM_TOY_STATE);
            if xs.len() != e * n + e {
                return Err(Error::shape(
                    "ssm-step toy",
                    format!("input must have {} entries, got {}", e * n + e, xs.len()),
                ));
            }
            let toy = SsmToy::new();
            let (h, xt) = xs.split_at(e * n);
            let mut tape = Tape::new();
            let hv = tape.leaf(Tensor::new(vec![e, n], h.to_vec())?);
            let xv = tape.leaf(Tensor::vector(xt.to_vec()));
            let (f, h_next, y) = toy.record(&mut tape, hv, xv)?;
            let grads = tape.backward(f)?;
            let r_in: f64 = grads.wrt(hv).data().iter().zip(h).map(|(g, v)| g * v).sum::<f64>()
                + grads.wrt(xv).data().iter().zip(xt).map(|(g, v)| g * v).sum::<f64>();
            // f is linear in h′ and y, so R(h′) + R(y) = f.
            let r_out = grads.wrt(h_next).data().iter().zip(tape.value(h_next).data()).map(|(g, v)| g * v).sum::<f64>()
                + grads.wrt(y).data().iter().zip(tape.value(y).data()).map(|(g, v)| g * v).sum::<f64>();
            Ok((r_in - r_out, toy.analytic(h, xt)))
        }
    }
}
