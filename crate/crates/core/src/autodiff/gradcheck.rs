// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks for taped functions.

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, x: Tensor, frozen: Option<&[Tensor]>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = match frozen {
        Some(v) => Tape::with_frozen_detaches(v.to_vec()),
        None => Tape::new(),
    };
    let xv = tape.leaf(x);
    let out = f(&mut tape, xv)?;
    let value = tape.try_value(out)?.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} is not finite")));
    }
    Ok(value)
}

/// Fourth-order central-difference gradient of a scalar taped function,
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
///
/// Stop-gradient nodes are held at the values they take at `x`, so the
/// result is the derivative of the detached function and is directly
/// comparable with the taped gradient.
pub fn numeric_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut reference = Tape::new();
    let xv = reference.leaf(x.clone());
    f(&mut reference, xv)?;
    let frozen = reference.detached_values().to_vec();

    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let at = |offset: f64| {
            let mut shifted = x.clone();
            shifted.data_mut()[i] += offset;
            evaluate(&f, shifted, Some(&frozen))
        };
        let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
        grad.data_mut()[i] = (m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * step);
    }
    Ok(grad)
}

/// Taped gradient of a scalar function at `x`.
pub fn taped_gradient<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let g = grads.wrt(xv);
    if !g.is_finite() {
        return Err(Error::Numeric("non-finite taped gradient".into()));
    }
    Ok(g)
}

/// Absolute floor of the relative-error denominator, so coordinates with a
/// vanishing gradient are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// Max over coordinates of `|autodiff − finite difference| / (|finite difference| + RELATIVE_ERROR_FLOOR)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let numeric = numeric_gradient(&f, x, step)?;
    let taped = taped_gradient(&f, x)?;
    Ok(taped
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max))
}
