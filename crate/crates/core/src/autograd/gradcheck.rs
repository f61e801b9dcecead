//! Finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Points closer than this many `ε` to a breakpoint are not checked.
pub const KINK_MARGIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCheck {
    /// Worst coordinate-wise relative error between backward and central
    /// differences.
    Checked { max_rel_error: f64 },
    /// Some non-smooth op saw an input within [`KINK_MARGIN`]·ε of a
    /// breakpoint, so the finite difference is meaningless there.
    NearKink { distance: f64 },
}

impl GradCheck {
    pub fn max_rel_error(&self) -> Option<f64> {
        match self {
            GradCheck::Checked { max_rel_error } => Some(*max_rel_error),
            GradCheck::NearKink { .. } => None,
        }
    }
}

fn eval<F>(f: &F, theta: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_ste_surrogate();
    let vars: Vec<Var> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective value {value}")));
    }
    Ok((tape, vars, loss))
}

/// Compares the gradient of a scalar function of `theta` against central
/// differences `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate.
///
/// The relative error per coordinate uses `max(|analytic|, |numeric|, 1e-12)`
/// as denominator. Fake-quant nodes run in clamp-surrogate mode (see
/// [`Tape::with_ste_surrogate`]).
pub fn grad_check<F>(f: F, theta: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("grad_check needs eps > 0, got {eps}")));
    }
    let (tape, vars, loss) = eval(&f, theta)?;
    if tape.kink_distance() < KINK_MARGIN * eps {
        return Ok(GradCheck::NearKink {
            distance: tape.kink_distance(),
        });
    }
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = theta.to_vec();
    for (pi, t) in theta.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        for j in 0..t.len() {
            let mut plus = t.data().to_vec();
            let mut minus = plus.clone();
            plus[j] += eps;
            minus[j] -= eps;
            probe[pi] = Tensor::from_parts(t.shape().to_vec(), plus);
            let fp = eval(&f, &probe)?;
            probe[pi] = Tensor::from_parts(t.shape().to_vec(), minus);
            let fm = eval(&f, &probe)?;
            let numeric =
                (fp.0.value(fp.2).item()? - fm.0.value(fm.2).item()?) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
        probe[pi] = t.clone();
    }
    Ok(GradCheck::Checked { max_rel_error: worst })
}
