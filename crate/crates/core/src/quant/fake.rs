use super::QuantParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct FakeQuantOutput {
    pub values: Tensor,
    /// Straight-through mask: `true` where the input lies inside the real
    /// interval covered by the quantizer.
    pub pass: Vec<bool>,
    pub kink_distance: f64,
}

/// Elementwise quantize-dequantize. With `surrogate` set, rounding is
/// skipped and only the clamp to the representable interval is applied.
pub(crate) fn fake_quant_values(x: &Tensor, qp: &QuantParams, surrogate: bool) -> Result<FakeQuantOutput> {
    let map = qp.channel_map(x.shape())?;
    let n = qp.scales().len();
    let bounds: Vec<(f64, f64)> = (0..n).map(|c| qp.real_bounds(c)).collect();
    let mut values = Vec::with_capacity(x.len());
    let mut pass = Vec::with_capacity(x.len());
    let mut kink = f64::INFINITY;
    for (i, &v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("fake-quant of non-finite value {v}")));
        }
        let c = map.channel(i);
        let (lo, hi) = bounds[c];
        kink = kink.min((v - lo).abs()).min((v - hi).abs());
        pass.push(v >= lo && v <= hi);
        if surrogate {
            values.push(v.clamp(lo, hi));
        } else {
            let s = qp.scales()[c];
            let t = v / s + qp.zero_points()[c] as f64;
            if t > qp.qmin() as f64 && t < qp.qmax() as f64 {
                kink = kink.min(((t - t.floor()) - 0.5).abs() * s);
            }
            values.push(qp.dequantize_one(qp.quantize_one(v, c), c));
        }
    }
    Ok(FakeQuantOutput {
        values: Tensor::new(x.shape().to_vec(), values)?,
        pass,
        kink_distance: kink,
    })
}

/// Value-level `dequantize(quantize(x))`.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    Ok(fake_quant_values(x, qp, false)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::quant::{compute_qparams, Scheme};

    fn unit_qp() -> QuantParams {
        // S = 0.01, Z0 = 0, 8 bits.
        compute_qparams(-1.27, 1.27, 8, Scheme::Symmetric).unwrap()
    }

    #[test]
    fn forward_rounds_to_grid() {
        let qp = unit_qp();
        assert!((qp.scale() - 0.01).abs() < 1e-15);
        let y = fake_quant(&Tensor::scalar(0.503), &qp).unwrap();
        assert!((y.item().unwrap() - 0.50).abs() < 1e-12);
    }

    #[test]
    fn straight_through_multiplier() {
        let qp = unit_qp();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -0.7, 5.0, -5.0]));
        let y = t.fake_quant(x, &qp).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap().get(x);
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn surrogate_is_plain_clamp() {
        let qp = unit_qp();
        let mut t = Tape::with_ste_surrogate();
        let x = t.leaf(Tensor::vector(vec![0.503, 2.0]));
        let y = t.fake_quant(x, &qp).unwrap();
        let (lo, hi) = qp.real_bounds(0);
        assert_eq!(t.value(y).data(), &[0.503, 2.0f64.clamp(lo, hi)]);
    }
}
