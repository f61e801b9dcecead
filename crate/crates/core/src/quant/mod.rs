//! Uniform quantizers: scale/zero-point algebra, range observers,
//! fake quantization with straight-through gradients and PACT clipping.

mod fake;
mod observer;
mod params;

pub use fake::fake_quant;
pub(crate) use fake::fake_quant_values;
pub use observer::{Histogram, ObserverKind, RangeObserver, HISTOGRAM_BINS};
pub use params::{
    check_bits, compute_qparams, dequantize, per_channel_qparams, quantize, Granularity,
    QuantParams, Scheme, MIN_SCALE,
};

use crate::error::{Error, Result};

/// Default PACT clip level.
pub const DEFAULT_PACT_ALPHA: f64 = 6.0;

/// Learnable clip bound of a PACT activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PactParams {
    alpha: f64,
}

impl PactParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::contract(format!("pact alpha must be positive, got {alpha}")));
        }
        Ok(PactParams { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `0.5·(|x| − |x − α| + α)`, i.e. 0 below zero, `x` on `[0, α)` and `α` above.
    pub fn apply(&self, x: f64) -> f64 {
        crate::autograd::pact_value(x, self.alpha)
    }
}

impl Default for PactParams {
    fn default() -> Self {
        PactParams {
            alpha: DEFAULT_PACT_ALPHA,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn pact_piecewise_cases() {
        let p = PactParams::new(6.0).unwrap();
        assert_eq!(p.apply(-2.0), 0.0);
        assert_eq!(p.apply(3.0), 3.0);
        assert_eq!(p.apply(10.0), 6.0);
        assert_eq!(p.apply(0.0), 0.0);
        for x in [-4.0, -0.5, 0.0, 1.5, 5.99, 6.0, 7.0] {
            let closed = 0.5 * (f64::abs(x) - f64::abs(x - 6.0) + 6.0);
            assert!((p.apply(x) - closed).abs() < 1e-15);
        }
        assert!(PactParams::new(0.0).is_err());
    }

    #[test]
    fn pact_alpha_gradient_by_central_difference() {
        let xs = [-1.0, 2.0, 9.0];
        let f = |alpha: f64| xs.iter().map(|&x| PactParams::new(alpha).unwrap().apply(x)).sum::<f64>();
        let eps = 1e-5;
        let numeric = (f(6.0 + eps) - f(6.0 - eps)) / (2.0 * eps);
        assert!((numeric - 1.0).abs() < 1e-9);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(xs.to_vec()));
        let a = t.leaf(Tensor::scalar(6.0));
        let y = t.pact(x, a).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).item().unwrap(), 1.0);
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 0.0]);
    }
}
