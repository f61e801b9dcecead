use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{split_axis, IntTensor, Tensor};

/// Smallest scale ever produced; degenerate ranges are floored here.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Symmetric => "symmetric",
            Scheme::Asymmetric => "asymmetric",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "symmetric" | "sym" => Ok(Scheme::Symmetric),
            "asymmetric" | "asym" => Ok(Scheme::Asymmetric),
            _ => Err(format!("expected symmetric|asymmetric, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Scale and zero point of a uniform `k`-bit quantizer, one pair per tensor
/// or one pair per channel along an axis.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    scales: Vec<f64>,
    zero_points: Vec<i64>,
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::contract(format!("bit width {bits} outside 2..=8")));
    }
    Ok(())
}

/// `(scale, zero_point)` for the range `[r_min, r_max]`.
fn scale_and_zero(r_min: f64, r_max: f64, bits: u8, scheme: Scheme) -> (f64, i64) {
    let half = (1i64 << (bits - 1)) as f64;
    match scheme {
        Scheme::Symmetric => {
            let s = r_max.abs().max(r_min.abs()) / (half - 1.0);
            (s.max(MIN_SCALE), 0)
        }
        Scheme::Asymmetric => {
            let levels = ((1i64 << bits) - 1) as f64;
            let s = ((r_max - r_min) / levels).max(MIN_SCALE);
            let z = (half - 1.0 - r_max / s).round();
            (s, z as i64)
        }
    }
}

fn check_range(r_min: f64, r_max: f64) -> Result<()> {
    if !(r_min.is_finite() && r_max.is_finite()) {
        return Err(Error::Numeric(format!("non-finite range [{r_min}, {r_max}]")));
    }
    if r_min > r_max {
        return Err(Error::contract(format!("range minimum {r_min} exceeds maximum {r_max}")));
    }
    Ok(())
}

/// Per-tensor quantizer for `[r_min, r_max]`.
///
/// Symmetric: `S = max(|r_max|, |r_min|) / (2^(k-1) - 1)`, `Z0 = 0`.
/// Asymmetric: `S = (r_max - r_min) / (2^k - 1)`,
/// `Z0 = round(2^(k-1) - 1 - r_max / S)`.
pub fn compute_qparams(r_min: f64, r_max: f64, bits: u8, scheme: Scheme) -> Result<QuantParams> {
    check_bits(bits)?;
    check_range(r_min, r_max)?;
    let (s, z) = scale_and_zero(r_min, r_max, bits, scheme);
    Ok(QuantParams {
        scales: vec![s],
        zero_points: vec![z],
        bits,
        scheme,
        granularity: Granularity::PerTensor,
    })
}

/// Symmetric quantizer per slice of `w` along `axis`, from each slice's
/// largest magnitude.
pub fn per_channel_qparams(w: &Tensor, bits: u8, axis: usize) -> Result<QuantParams> {
    check_bits(bits)?;
    if axis >= w.rank() {
        return Err(Error::contract(format!(
            "channel axis {axis} out of range for shape {:?}",
            w.shape()
        )));
    }
    let (outer, n, inner) = split_axis(w.shape(), axis);
    if n == 0 {
        return Err(Error::contract("per-channel quantization over an empty axis"));
    }
    let mut max_abs = vec![0.0f64; n];
    let data = w.data();
    for o in 0..outer {
        for (c, m) in max_abs.iter_mut().enumerate() {
            let base = (o * n + c) * inner;
            for &v in &data[base..base + inner] {
                if !v.is_finite() {
                    return Err(Error::Numeric("non-finite weight".into()));
                }
                *m = m.max(v.abs());
            }
        }
    }
    let scales = max_abs
        .iter()
        .map(|&m| scale_and_zero(-m, m, bits, Scheme::Symmetric).0)
        .collect();
    Ok(QuantParams {
        scales,
        zero_points: vec![0; n],
        bits,
        scheme: Scheme::Symmetric,
        granularity: Granularity::PerChannel { axis },
    })
}

impl QuantParams {
    /// Per-tensor quantizer from an explicit scale and zero point.
    pub fn per_tensor(scale: f64, zero_point: i64, bits: u8, scheme: Scheme) -> Result<QuantParams> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::contract(format!("scale must be positive and finite, got {scale}")));
        }
        if scheme == Scheme::Symmetric && zero_point != 0 {
            return Err(Error::contract("symmetric quantizers have a zero point of 0"));
        }
        Ok(QuantParams {
            scales: vec![scale],
            zero_points: vec![zero_point],
            bits,
            scheme,
            granularity: Granularity::PerTensor,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    /// Scale of a per-tensor quantizer (first channel otherwise).
    pub fn scale(&self) -> f64 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i64 {
        self.zero_points[0]
    }

    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Real interval `[S·(qmin − Z0), S·(qmax − Z0)]` of channel `c`.
    pub fn real_bounds(&self, c: usize) -> (f64, f64) {
        let (s, z) = (self.scales[c], self.zero_points[c]);
        (s * (self.qmin() - z) as f64, s * (self.qmax() - z) as f64)
    }

    /// Maps every flat index of a tensor with `shape` to its channel.
    pub(crate) fn channel_map(&self, shape: &[usize]) -> Result<ChannelMap> {
        match self.granularity {
            Granularity::PerTensor => Ok(ChannelMap { n: 1, inner: usize::MAX }),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() || shape[axis] != self.scales.len() {
                    return Err(Error::Dimension {
                        op: "per-channel quantizer",
                        lhs: shape.to_vec(),
                        rhs: vec![self.scales.len()],
                    });
                }
                let (_, n, inner) = split_axis(shape, axis);
                Ok(ChannelMap { n, inner })
            }
        }
    }

    #[inline]
    pub(crate) fn quantize_one(&self, x: f64, c: usize) -> i64 {
        let t = x / self.scales[c] + self.zero_points[c] as f64;
        // f64::round rounds half away from zero.
        (t.round() as i64).clamp(self.qmin(), self.qmax())
    }

    #[inline]
    pub(crate) fn dequantize_one(&self, q: i64, c: usize) -> f64 {
        self.scales[c] * (q - self.zero_points[c]) as f64
    }
}

pub(crate) struct ChannelMap {
    n: usize,
    inner: usize,
}

impl ChannelMap {
    #[inline]
    pub fn channel(&self, flat: usize) -> usize {
        if self.n == 1 {
            0
        } else {
            (flat / self.inner) % self.n
        }
    }
}

/// `q = clamp(round(x / S + Z0), −2^(k−1), 2^(k−1) − 1)`.
pub fn quantize(x: &Tensor, qp: &QuantParams) -> Result<IntTensor> {
    let map = qp.channel_map(x.shape())?;
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("cannot quantize non-finite value {v}")));
        }
        out.push(qp.quantize_one(v, map.channel(i)) as i32);
    }
    IntTensor::new(x.shape().to_vec(), out)
}

/// `r = S·(q − Z0)`.
pub fn dequantize(q: &IntTensor, qp: &QuantParams) -> Result<Tensor> {
    let map = qp.channel_map(q.shape())?;
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| qp.dequantize_one(v as i64, map.channel(i)))
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}
