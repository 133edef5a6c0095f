// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eagerly evaluated computation tape with reverse-mode gradients.
//!
//! Every primitive computes its forward value immediately and appends a
//! node to the tape. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference nodes recorded before it.
//!
//! Broadcasting is deliberately narrow: a binary elementwise op accepts
//! two equal shapes, a single-element operand against any tensor, or an
//! operand whose shape is a trailing suffix of the other's.

use crate::autodiff::ops;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the smaller operand of a binary op is repeated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// The right operand (length n) repeats across the left.
    Right(usize),
    /// The left operand (length n) repeats across the right.
    Left(usize),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// Stop-gradient. The input is kept for inspection only; backward
    /// never propagates through it.
    Detach(#[allow(dead_code)] Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    Matmul(Var, Var),
    SumAll(Var),
    SumLast(Var),
    MeanLast(Var),
    ScaleRows(Var, Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Expand {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    CausalConv(Var, Var),
    SelectiveScan {
        a_bar: Var,
        b_bar: Var,
        c: Var,
        x: Var,
        /// Hidden states h_1..h_L, laid out like `a_bar`.
        states: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Parameter-free primitive kinds accepted by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Sigmoid,
    Softplus,
    Powf(f64),
    Matmul,
    SumAll,
    SumLast,
    MeanLast,
    ScaleRows,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Expand { axis: usize, size: usize },
    CausalConv,
    SelectiveScan,
    Detach,
}

impl Primitive {
    fn arity(&self) -> Option<usize> {
        use Primitive::*;
        match self {
            Add | Sub | Mul | Matmul | ScaleRows | CausalConv => Some(2),
            SelectiveScan => Some(4),
            Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialising zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// A single-threaded recording of eagerly evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th [`Tape::detach`] returns `frozen[k]` instead of
    /// its input. Used to finite-difference a function while holding its
    /// stop-gradient quantities at their values from a reference point.
    pub fn with_frozen_detaches(frozen: Vec<Tensor>) -> Self {
        Self {
            replay: Some(frozen),
            ..Self::default()
        }
    }

    /// Values produced by every detach so far, in recording order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of `v`.
    ///
    /// # Panics
    /// If `v` was not created by this tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Usage(format!("node {} is not on this tape", v.0)))
    }

    fn get(&self, v: Var) -> Result<&Tensor> {
        self.try_value(v)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Dispatches a parameter-free primitive by kind.
    pub fn record(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::Usage(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        }
        use Primitive::*;
        match kind {
            Add => self.add(inputs[0], inputs[1]),
            Sub => self.sub(inputs[0], inputs[1]),
            Mul => self.mul(inputs[0], inputs[1]),
            Scale(c) => self.scale(inputs[0], c),
            AddScalar(c) => self.add_scalar(inputs[0], c),
            Exp => self.exp(inputs[0]),
            Sigmoid => self.sigmoid(inputs[0]),
            Softplus => self.softplus(inputs[0]),
            Powf(p) => self.powf(inputs[0], p),
            Matmul => self.matmul(inputs[0], inputs[1]),
            SumAll => self.sum(inputs[0]),
            SumLast => self.sum_last(inputs[0]),
            MeanLast => self.mean_last(inputs[0]),
            ScaleRows => self.scale_rows(inputs[0], inputs[1]),
            Slice { axis, start, len } => self.slice(inputs[0], axis, start, len),
            Concat { axis } => self.concat(inputs, axis),
            Expand { axis, size } => self.expand(inputs[0], axis, size),
            CausalConv => self.causal_conv(inputs[0], inputs[1]),
            SelectiveScan => self.selective_scan(inputs[0], inputs[1], inputs[2], inputs[3]),
            Detach => self.detach(inputs[0]),
        }
    }

    /// Stop-gradient: identical forward value, zero backward contribution.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = match self.replay.as_ref().and_then(|r| r.get(self.detached.len())) {
            Some(frozen) => {
                let own = self.get(x)?;
                if frozen.shape() != own.shape() {
                    return Err(Error::shape(
                        "detach",
                        format!(
                            "frozen value {:?} does not match input {:?}",
                            frozen.shape(),
                            own.shape()
                        ),
                    ));
                }
                frozen.clone()
            }
            None => self.get(x)?.clone(),
        };
        self.detached.push(value.clone());
        Ok(self.push(value, Op::Detach(x)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.get(a)?, self.get(b)?);
        let (shape, bc) = ops::broadcast(name, va.shape(), vb.shape())?;
        let data = ops::zip_broadcast(va.data(), vb.data(), bc, f);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, make(a, b, bc)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.get(x)?.map(f);
        Ok(self.push(out, op))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::softplus, Op::Softplus(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    /// `a[.., K] · b[K, M] -> [.., M]`, or `a[.., K] · b[K] -> [..]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_forward(self.get(a)?, self.get(b)?)?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.get(x)?.sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x)))
    }

    /// Reduces the last axis by summation.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let out = ops::reduce_last(self.get(x)?, "sum_last", 1.0)?;
        Ok(self.push(out, Op::SumLast(x)))
    }

    /// Reduces the last axis by averaging.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let v = self.get(x)?;
        let d = v.last_dim() as f64;
        let out = ops::reduce_last(v, "mean_last", 1.0 / d)?;
        Ok(self.push(out, Op::MeanLast(x)))
    }

    /// Multiplies every row `x[.., :]` by the matching entry of `s[..]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.get(x)?, self.get(s)?);
        let rows = &vx.shape()[..vx.rank().saturating_sub(1)];
        if vx.rank() == 0 || rows != vs.shape() {
            return Err(Error::shape(
                "scale_rows",
                format!("rows of {:?} vs scales {:?}", vx.shape(), vs.shape()),
            ));
        }
        let d = vx.last_dim();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * vs.data()[i / d])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(x, s)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_forward(self.get(x)?, axis, start, len)?;
        Ok(self.push(out, Op::Slice { input: x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let values = xs.iter().map(|&v| self.get(v)).collect::<Result<Vec<_>>>()?;
        let out = ops::concat_forward(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Inserts a new axis at `axis` holding `size` copies of `x`.
    pub fn expand(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        let out = ops::expand_forward(self.get(x)?, axis, size)?;
        Ok(self.push(out, Op::Expand { input: x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.get(x)?.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Depthwise causal convolution of `x[.., L, E]` with kernels `w[E, W]`:
    /// the sequence is left-padded with `W - 1` zeros so output `t` only sees
    /// inputs `t - W + 1 ..= t`.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::causal_conv_forward(self.get(x)?, self.get(w)?)?;
        Ok(self.push(out, Op::CausalConv(x, w)))
    }

    /// Selective scan with `h_0 = 0`:
    /// `h_t = a_bar_t ⊙ h_{t-1} + b_bar_t ⊙ x_t`, `y_t[e] = Σ_n c_t[n] h_t[e, n]`.
    ///
    /// Shapes: `a_bar, b_bar: [.., L, E, N]`, `c: [.., L, N]`, `x: [.., L, E]`.
    pub fn selective_scan(&mut self, a_bar: Var, b_bar: Var, c: Var, x: Var) -> Result<Var> {
        let (out, states) = ops::scan_forward(
            self.get(a_bar)?,
            self.get(b_bar)?,
            self.get(c)?,
            self.get(x)?,
        )?;
        Ok(self.push(
            out,
            Op::SelectiveScan {
                a_bar,
                b_bar,
                c,
                x,
                states,
            },
        ))
    }

    /// Rows `table[ids[i], :]` stacked into `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.get(table)?;
        if t.rank() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("table must be rank 2, got {:?}", t.shape()),
            ));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { token: id, vocab: v });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Negative log-likelihood of `target` under softmax(`logits[C]`).
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.get(logits)?;
        if l.rank() != 1 || target >= l.numel() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with target {target}", l.shape()),
            ));
        }
        let probs = ops::softmax(l.data());
        let loss = ops::log_sum_exp(l.data()) - l.data()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Gradients of the single-element `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let v = self.get(output)?;
        if v.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output or an explicit seed, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), 1.0);
        self.backward_with_seed(output, seed)
    }

    /// Vector-Jacobian product seeded with `seed` (same shape as `output`).
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let v = self.get(output)?;
        if v.shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), v.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b, bc) => {
                let (ga, gb) = ops::binary_grads(g, val(*a), val(*b), *bc, |_, _| (1.0, 1.0));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sub(a, b, bc) => {
                let (ga, gb) = ops::binary_grads(g, val(*a), val(*b), *bc, |_, _| (1.0, -1.0));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mul(a, b, bc) => {
                let (ga, gb) = ops::binary_grads(g, val(*a), val(*b), *bc, |x, y| (y, x));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, ops::zip_map(g, out, |gi, yi| gi * yi)),
            Op::Sigmoid(x) => acc(*x, ops::zip_map(g, out, |gi, s| gi * s * (1.0 - s))),
            Op::Softplus(x) => acc(*x, ops::zip_map(g, val(*x), |gi, xi| gi * ops::sigmoid(xi))),
            Op::Powf(x, p) => acc(
                *x,
                ops::zip_map(g, val(*x), |gi, xi| gi * p * xi.powf(p - 1.0)),
            ),
            Op::Matmul(a, b) => {
                let (ga, gb) = ops::matmul_backward(g, val(*a), val(*b));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::SumLast(x) => acc(*x, ops::spread_last(g, val(*x).shape(), 1.0)),
            Op::MeanLast(x) => {
                let d = val(*x).last_dim() as f64;
                acc(*x, ops::spread_last(g, val(*x).shape(), 1.0 / d));
            }
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let d = vx.last_dim();
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, gi)| gi * vs.data()[k / d])
                    .collect();
                let mut gs = vec![0.0; vs.numel()];
                for (k, (gi, xi)) in g.data().iter().zip(vx.data()).enumerate() {
                    gs[k / d] += gi * xi;
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
                acc(*s, Tensor::new(vs.shape().to_vec(), gs).expect("shape"));
            }
            Op::Slice { input, axis, start } => {
                acc(*input, ops::slice_backward(g, val(*input).shape(), *axis, *start));
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    let part = ops::slice_forward(g, *axis, offset, len).expect("concat slice");
                    offset += len;
                    acc(v, part);
                }
            }
            Op::Expand { input, axis } => {
                acc(*input, ops::expand_backward(g, val(*input).shape(), *axis));
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(val(*x).shape().to_vec()).expect("shape"));
            }
            Op::CausalConv(x, w) => {
                let (gx, gw) = ops::causal_conv_backward(g, val(*x), val(*w));
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::SelectiveScan {
                a_bar,
                b_bar,
                c,
                x,
                states,
            } => {
                let grads = ops::scan_backward(g, val(*a_bar), val(*b_bar), val(*c), val(*x), states);
                acc(*a_bar, grads.a_bar);
                acc(*b_bar, grads.b_bar);
                acc(*c, grads.c);
                acc(*x, grads.x);
            }
            Op::GatherRows { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut gt = Tensor::zeros(t.shape());
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, gi) in dst.iter_mut().zip(&g.data()[row * d..(row + 1) * d]) {
                        *o += gi;
                    }
                }
                acc(*table, gt);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let s = g.data()[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| s * (p - if k == *target { 1.0 } else { 0.0 }))
                    .collect();
                acc(*logits, Tensor::new(val(*logits).shape().to_vec(), data).expect("shape"));
            }
        }
    }
}
