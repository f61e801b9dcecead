use super::kernels::{self, gemm_nn};
use super::{grad_slot, Tape, Var};
use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{matmul_dims, split_axis, Tensor};

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    SwapLast2 {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        n: usize,
        p: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Relu(Var),
    Gelu(Var),
    Pact {
        x: Var,
        alpha: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        dims: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Depthwise {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: [usize; 5],
    },
    Pointwise {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        batch: usize,
        cin: usize,
        cout: usize,
        pixels: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    FakeQuant {
        x: Var,
        pass: Vec<bool>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Reshape(x) | Op::Relu(x) | Op::Gelu(x) => vec![*x],
            Op::SwapLast2 { x, .. }
            | Op::Narrow { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::FakeQuant { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => opt_inputs(&[*x, *w], *b),
            Op::Pact { x, alpha } => vec![*x, *alpha],
            Op::ChannelAffine { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Depthwise { x, kernel, bias, .. } | Op::Pointwise { x, kernel, bias, .. } => {
                opt_inputs(&[*x, *kernel], *bias)
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

fn opt_inputs(base: &[Var], extra: Option<Var>) -> Vec<Var> {
    let mut v = base.to_vec();
    v.extend(extra);
    v
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

fn channel_vec(tape: &Tape, v: Var, c: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 1 || s[0] != c {
        return Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![c],
        });
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).expect_same_shape(self.value(b), op)?;
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `[B, R, C] -> [B, C, R]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::contract(format!("swap_last2 needs rank 3, got {s:?}")));
        }
        let data = kernels::swap_last2(self.value(x).data(), s[0], s[1], s[2]);
        let v = Tensor::from_parts(vec![s[0], s[2], s[1]], data);
        Ok(self.push(
            v,
            Op::SwapLast2 {
                x,
                batch: s[0],
                rows: s[1],
                cols: s[2],
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "narrow")?;
        if start + len > s[axis] {
            return Err(Error::contract(format!(
                "narrow [{start}, {}) exceeds extent {} of axis {axis}",
                start + len,
                s[axis]
            )));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(
            v,
            Op::Narrow {
                x,
                outer,
                extent,
                inner,
                start,
                len,
            },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .to_vec();
        check_axis(&first, axis, "concat")?;
        let mut extents = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in xs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                inner,
                extents,
            },
        ))
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "mean_axis")?;
        let (outer, extent, inner) = split_axis(&s, axis);
        if extent == 0 {
            return Err(Error::Degenerate("mean over empty axis".into()));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..extent {
                let row = &src[(o * extent + i) * inner..(o * extent + i + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let inv = 1.0 / extent as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = s;
        shape.remove(axis);
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(
            v,
            Op::MeanAxis {
                x,
                outer,
                extent,
                inner,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, p) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * p];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        let v = Tensor::from_parts(vec![m, p], out);
        Ok(self.push(v, Op::Matmul { a, b, m, n, p }))
    }

    /// Fully connected map `y = x·wᵀ + b` over the last axis of `x`.
    /// `w` is `[fan_out, fan_in]`, `b` is `[fan_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[1] != xs[xs.len() - 1] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (fan_out, fan_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            channel_vec(self, b, fan_out, "linear bias")?;
        }
        let rows = self.value(x).len() / fan_in.max(1);
        let wt = kernels::transpose(self.value(w).data(), fan_out, fan_in);
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut o = Vec::with_capacity(rows * fan_out);
                for _ in 0..rows {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![0.0; rows * fan_out],
        };
        gemm_nn(self.value(x).data(), &wt, &mut out, rows, fan_in, fan_out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(
            v,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let kink = xv.data().iter().fold(f64::INFINITY, |d, v| d.min(v.abs()));
        let v = xv.map(|e| if e > 0.0 { e } else { 0.0 });
        self.note_kink(kink);
        self.push(v, Op::Relu(x))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Clip to `[0, α]` with a learnable scalar `α`.
    pub fn pact(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let a = self.value(alpha).item()?;
        if !(a > 0.0) {
            return Err(Error::contract(format!("pact alpha must be positive, got {a}")));
        }
        let xv = self.value(x);
        let kink = xv
            .data()
            .iter()
            .fold(f64::INFINITY, |d, &v| d.min(v.abs()).min((v - a).abs()));
        let v = xv.map(|e| pact_value(e, a));
        self.note_kink(kink);
        Ok(self.push(v, Op::Pact { x, alpha }))
    }

    /// `y[.., c, ..] = scale[c]·x + shift[c]` along `axis`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "channel_affine")?;
        let dims = split_axis(&s, axis);
        channel_vec(self, scale, dims.1, "channel_affine scale")?;
        channel_vec(self, shift, dims.1, "channel_affine shift")?;
        let (outer, c, inner) = dims;
        let (xv, a, b) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for j in 0..inner {
                    out[base + j] = a[ch] * xv[base + j] + b[ch];
                }
            }
        }
        let v = Tensor::from_parts(s, out);
        Ok(self.push(
            v,
            Op::ChannelAffine {
                x,
                scale,
                shift,
                dims,
            },
        ))
    }

    /// Normalizes across `axis` at every other position, then applies `gamma`
    /// and `beta` per channel. Uses the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "layer_norm")?;
        let dims = split_axis(&s, axis);
        let (outer, c, inner) = dims;
        channel_vec(self, gamma, c, "layer_norm gamma")?;
        channel_vec(self, beta, c, "layer_norm beta")?;
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + j;
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += xv[idx(ch)];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = xv[idx(ch)] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + j] = is;
                for ch in 0..c {
                    let h = (xv[idx(ch)] - mean) * is;
                    xhat[idx(ch)] = h;
                    out[idx(ch)] = h * g[ch] + b[ch];
                }
            }
        }
        let v = Tensor::from_parts(s, out);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
            },
        ))
    }

    /// Per-channel normalization along `axis`. In [`BnMode::Train`] the
    /// batch mean and population variance per channel are returned so the
    /// caller can update running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "batch_norm")?;
        let dims = split_axis(&s, axis);
        let (outer, c, inner) = dims;
        channel_vec(self, gamma, c, "batch_norm gamma")?;
        channel_vec(self, beta, c, "batch_norm beta")?;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if s[0] < 2 {
                    return Err(Error::Degenerate(format!(
                        "batch norm in train mode needs batch >= 2, got {}",
                        s[0]
                    )));
                }
                let n = (outer * inner) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut m = 0.0;
                    for o in 0..outer {
                        for j in 0..inner {
                            m += xv[(o * c + ch) * inner + j];
                        }
                    }
                    m /= n;
                    let mut v = 0.0;
                    for o in 0..outer {
                        for j in 0..inner {
                            let d = xv[(o * c + ch) * inner + j] - m;
                            v += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / n;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension {
                        op: "batch_norm running stats",
                        lhs: vec![mean.len(), var.len()],
                        rhs: vec![c],
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for j in 0..inner {
                    let h = (xv[base + j] - mean[ch]) * inv_std[ch];
                    xhat[base + j] = h;
                    out[base + j] = h * g[ch] + b[ch];
                }
            }
        }
        let v = Tensor::from_parts(s, out);
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((var_out, batch_stats.then_some((mean, var))))
    }

    /// Depthwise "same" convolution of `[B, C, H, W]` with a `[C, 1, k, k]`
    /// kernel, `k` odd.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[0] != xs[1] || ks[1] != 1 || ks[2] != ks[3] {
            return Err(Error::Dimension {
                op: "depthwise_conv",
                lhs: xs,
                rhs: ks,
            });
        }
        let k = ks[2];
        if k % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "depthwise kernel size {k} is even; only odd sizes keep 'same' padding centred"
            )));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if let Some(b) = bias {
            channel_vec(self, b, c, "depthwise bias")?;
        }
        let mut out = vec![0.0; bsz * c * h * w];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(h * w).enumerate() {
                chunk.fill(bv[i % c]);
            }
        }
        kernels::depthwise_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            &mut out,
            bsz,
            c,
            h,
            w,
            k,
        );
        let v = Tensor::from_parts(xs, out);
        Ok(self.push(
            v,
            Op::Depthwise {
                x,
                kernel,
                bias,
                dims: [bsz, c, h, w, k],
            },
        ))
    }

    /// 1×1 convolution of `[B, C, H, W]` with a `[C_out, C, 1, 1]` kernel.
    pub fn pointwise_conv(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] {
            return Err(Error::Dimension {
                op: "pointwise_conv",
                lhs: xs,
                rhs: ks,
            });
        }
        if ks[2] != 1 || ks[3] != 1 {
            return Err(Error::Unsupported(format!(
                "pointwise kernel must be 1x1, got {}x{}",
                ks[2], ks[3]
            )));
        }
        let (bsz, cin, pixels) = (xs[0], xs[1], xs[2] * xs[3]);
        let cout = ks[0];
        if let Some(b) = bias {
            channel_vec(self, b, cout, "pointwise bias")?;
        }
        let mut out = vec![0.0; bsz * cout * pixels];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(pixels).enumerate() {
                chunk.fill(bv[i % cout]);
            }
        }
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        for b in 0..bsz {
            gemm_nn(
                kv,
                &xv[b * cin * pixels..(b + 1) * cin * pixels],
                &mut out[b * cout * pixels..(b + 1) * cout * pixels],
                cout,
                cin,
                pixels,
            );
        }
        let v = Tensor::from_parts(vec![bsz, cout, xs[2], xs[3]], out);
        Ok(self.push(
            v,
            Op::Pointwise {
                x,
                kernel,
                bias,
                batch: bsz,
                cin,
                cout,
                pixels,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        if s[0] == 0 {
            return Err(Error::Degenerate("cross entropy over empty batch".into()));
        }
        let (bsz, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; bsz * k];
        let mut loss = 0.0;
        for b in 0..bsz {
            let row = &lv[b * k..(b + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (p, &v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in &mut probs[b * k..(b + 1) * k] {
                *p /= z;
            }
            loss += -(row[labels[b]] - mx - z.ln());
        }
        let v = Tensor::scalar(loss / bsz as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes: k,
            },
        ))
    }

    /// Quantize-dequantize with a straight-through gradient: the incoming
    /// gradient passes where the input lies inside the representable range
    /// and is zeroed where the quantizer saturates.
    pub fn fake_quant(&mut self, x: Var, qp: &QuantParams) -> Result<Var> {
        let fq = crate::quant::fake_quant_values(self.value(x), qp, self.ste_surrogate)?;
        self.note_kink(fq.kink_distance);
        Ok(self.push(fq.values, Op::FakeQuant { x, pass: fq.pass }))
    }
}

pub(crate) fn pact_value(x: f64, alpha: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else if x < alpha {
        x
    } else {
        alpha
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, src: impl Iterator<Item = f64>) {
    if let Some(d) = dst {
        for (a, b) in d.iter_mut().zip(src) {
            *a += b;
        }
    }
}

pub(super) fn backward_op(
    tape: &Tape,
    op: &Op,
    _out: &Tensor,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |v: Var| tape.value(v).data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grad_slot(grads, tape, *a), g.iter().copied());
            add_into(grad_slot(grads, tape, *b), g.iter().copied());
        }
        Op::Sub(a, b) => {
            add_into(grad_slot(grads, tape, *a), g.iter().copied());
            add_into(grad_slot(grads, tape, *b), g.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            add_into(grad_slot(grads, tape, *a), g.iter().zip(bv).map(|(g, b)| g * b));
            add_into(grad_slot(grads, tape, *b), g.iter().zip(av).map(|(g, a)| g * a));
        }
        Op::Scale(x, c) => add_into(grad_slot(grads, tape, *x), g.iter().map(|v| v * c)),
        Op::Sum(x) => {
            let n = tape.value(*x).len();
            add_into(grad_slot(grads, tape, *x), std::iter::repeat(g[0]).take(n));
        }
        Op::Reshape(x) => add_into(grad_slot(grads, tape, *x), g.iter().copied()),
        Op::SwapLast2 {
            x,
            batch,
            rows,
            cols,
        } => {
            let back = kernels::swap_last2(g, *batch, *cols, *rows);
            add_into(grad_slot(grads, tape, *x), back.into_iter());
        }
        Op::Narrow {
            x,
            outer,
            extent,
            inner,
            start,
            len,
        } => {
            if let Some(d) = grad_slot(grads, tape, *x) {
                let chunk = len * inner;
                for o in 0..*outer {
                    let base = (o * extent + start) * inner;
                    for (a, b) in d[base..base + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                        *a += b;
                    }
                }
            }
        }
        Op::Concat {
            xs,
            outer,
            inner,
            extents,
        } => {
            let total: usize = extents.iter().sum();
            let mut offset = 0;
            for (&v, &e) in xs.iter().zip(extents) {
                if let Some(d) = grad_slot(grads, tape, v) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                        for (a, b) in d[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                offset += e;
            }
        }
        Op::MeanAxis {
            x,
            outer,
            extent,
            inner,
        } => {
            if let Some(d) = grad_slot(grads, tape, *x) {
                let inv = 1.0 / *extent as f64;
                for o in 0..*outer {
                    for i in 0..*extent {
                        let dst = &mut d[(o * extent + i) * inner..(o * extent + i + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *a += b * inv;
                        }
                    }
                }
            }
        }
        Op::Matmul { a, b, m, n, p } => {
            if let Some(d) = grad_slot(grads, tape, *a) {
                let bt = kernels::transpose(val(*b), *n, *p);
                gemm_nn(g, &bt, d, *m, *p, *n);
            }
            if let Some(d) = grad_slot(grads, tape, *b) {
                let at = kernels::transpose(val(*a), *m, *n);
                gemm_nn(&at, g, d, *n, *m, *p);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            fan_in,
            fan_out,
        } => {
            if let Some(d) = grad_slot(grads, tape, *x) {
                gemm_nn(g, val(*w), d, *rows, *fan_out, *fan_in);
            }
            if let Some(d) = grad_slot(grads, tape, *w) {
                let gt = kernels::transpose(g, *rows, *fan_out);
                gemm_nn(&gt, val(*x), d, *fan_out, *rows, *fan_in);
            }
            if let Some(bias) = b {
                if let Some(d) = grad_slot(grads, tape, *bias) {
                    for r in 0..*rows {
                        for (a, v) in d.iter_mut().zip(&g[r * fan_out..(r + 1) * fan_out]) {
                            *a += v;
                        }
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            add_into(
                grad_slot(grads, tape, *x),
                g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
            );
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            add_into(
                grad_slot(grads, tape, *x),
                g.iter().zip(xv).map(|(g, &x)| g * kernels::gelu_grad(x)),
            );
        }
        Op::Pact { x, alpha } => {
            let xv = val(*x);
            let a = val(*alpha)[0];
            add_into(
                grad_slot(grads, tape, *x),
                g.iter()
                    .zip(xv)
                    .map(|(g, &x)| if (0.0..a).contains(&x) { *g } else { 0.0 }),
            );
            if let Some(d) = grad_slot(grads, tape, *alpha) {
                d[0] += g
                    .iter()
                    .zip(xv)
                    .fold(0.0, |s, (g, &x)| if x >= a { s + g } else { s });
            }
        }
        Op::ChannelAffine {
            x,
            scale,
            shift,
            dims: (outer, c, inner),
        } => {
            let (xv, av) = (val(*x), val(*scale));
            if let Some(d) = grad_slot(grads, tape, *x) {
                for o in 0..*outer {
                    for ch in 0..*c {
                        let base = (o * c + ch) * inner;
                        for j in 0..*inner {
                            d[base + j] += g[base + j] * av[ch];
                        }
                    }
                }
            }
            if let Some(d) = grad_slot(grads, tape, *scale) {
                per_channel_accumulate(d, g, Some(xv), *outer, *c, *inner);
            }
            if let Some(d) = grad_slot(grads, tape, *shift) {
                per_channel_accumulate(d, g, None, *outer, *c, *inner);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            dims: (outer, c, inner),
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma);
            if let Some(d) = grad_slot(grads, tape, *x) {
                let n = *c as f64;
                for o in 0..*outer {
                    for j in 0..*inner {
                        let idx = |ch: usize| (o * c + ch) * inner + j;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ch in 0..*c {
                            let dh = g[idx(ch)] * gv[ch];
                            s1 += dh;
                            s2 += dh * xhat[idx(ch)];
                        }
                        let is = inv_std[o * inner + j];
                        for ch in 0..*c {
                            let dh = g[idx(ch)] * gv[ch];
                            d[idx(ch)] += is / n * (n * dh - s1 - xhat[idx(ch)] * s2);
                        }
                    }
                }
            }
            if let Some(d) = grad_slot(grads, tape, *gamma) {
                per_channel_accumulate(d, g, Some(xhat), *outer, *c, *inner);
            }
            if let Some(d) = grad_slot(grads, tape, *beta) {
                per_channel_accumulate(d, g, None, *outer, *c, *inner);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            dims: (outer, c, inner),
            xhat,
            inv_std,
            batch_stats,
        } => {
            let gv = val(*gamma);
            if let Some(d) = grad_slot(grads, tape, *x) {
                let n = (outer * inner) as f64;
                for ch in 0..*c {
                    let is = inv_std[ch];
                    if *batch_stats {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for o in 0..*outer {
                            let base = (o * c + ch) * inner;
                            for j in 0..*inner {
                                let dh = g[base + j] * gv[ch];
                                s1 += dh;
                                s2 += dh * xhat[base + j];
                            }
                        }
                        for o in 0..*outer {
                            let base = (o * c + ch) * inner;
                            for j in 0..*inner {
                                let dh = g[base + j] * gv[ch];
                                d[base + j] += is / n * (n * dh - s1 - xhat[base + j] * s2);
                            }
                        }
                    } else {
                        for o in 0..*outer {
                            let base = (o * c + ch) * inner;
                            for j in 0..*inner {
                                d[base + j] += g[base + j] * gv[ch] * is;
                            }
                        }
                    }
                }
            }
            if let Some(d) = grad_slot(grads, tape, *gamma) {
                per_channel_accumulate(d, g, Some(xhat), *outer, *c, *inner);
            }
            if let Some(d) = grad_slot(grads, tape, *beta) {
                per_channel_accumulate(d, g, None, *outer, *c, *inner);
            }
        }
        Op::Depthwise {
            x,
            kernel,
            bias,
            dims: [bsz, c, h, w, k],
        } => {
            let need_x = tape.requires_grad(*x);
            let need_k = tape.requires_grad(*kernel);
            if need_x || need_k {
                let mut gx = vec![0.0; tape.value(*x).len()];
                let mut gk = vec![0.0; tape.value(*kernel).len()];
                kernels::depthwise_backward(
                    val(*x),
                    val(*kernel),
                    g,
                    &mut gx,
                    &mut gk,
                    *bsz,
                    *c,
                    *h,
                    *w,
                    *k,
                );
                add_into(grad_slot(grads, tape, *x), gx.into_iter());
                add_into(grad_slot(grads, tape, *kernel), gk.into_iter());
            }
            if let Some(b) = bias {
                if let Some(d) = grad_slot(grads, tape, *b) {
                    per_channel_accumulate(d, g, None, *bsz, *c, h * w);
                }
            }
        }
        Op::Pointwise {
            x,
            kernel,
            bias,
            batch,
            cin,
            cout,
            pixels,
        } => {
            let (xv, kv) = (val(*x), val(*kernel));
            if let Some(d) = grad_slot(grads, tape, *x) {
                let kt = kernels::transpose(kv, *cout, *cin);
                for b in 0..*batch {
                    gemm_nn(
                        &kt,
                        &g[b * cout * pixels..(b + 1) * cout * pixels],
                        &mut d[b * cin * pixels..(b + 1) * cin * pixels],
                        *cin,
                        *cout,
                        *pixels,
                    );
                }
            }
            if let Some(d) = grad_slot(grads, tape, *kernel) {
                for b in 0..*batch {
                    let xt = kernels::transpose(&xv[b * cin * pixels..(b + 1) * cin * pixels], *cin, *pixels);
                    gemm_nn(&g[b * cout * pixels..(b + 1) * cout * pixels], &xt, d, *cout, *pixels, *cin);
                }
            }
            if let Some(bv) = bias {
                if let Some(d) = grad_slot(grads, tape, *bv) {
                    per_channel_accumulate(d, g, None, *batch, *cout, *pixels);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            if let Some(d) = grad_slot(grads, tape, *logits) {
                let scale = g[0] / labels.len() as f64;
                for (b, &l) in labels.iter().enumerate() {
                    for j in 0..*classes {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        d[b * classes + j] += scale * (probs[b * classes + j] - onehot);
                    }
                }
            }
        }
        Op::FakeQuant { x, pass } => {
            add_into(
                grad_slot(grads, tape, *x),
                g.iter().zip(pass).map(|(g, &p)| if p { *g } else { 0.0 }),
            );
        }
    }
}

/// `d[c] += Σ_{o,j} g · (w or 1)` over the `(outer, c, inner)` layout.
fn per_channel_accumulate(
    d: &mut [f64],
    g: &[f64],
    weight: Option<&[f64]>,
    outer: usize,
    c: usize,
    inner: usize,
) {
    for o in 0..outer {
        for (ch, dc) in d.iter_mut().enumerate().take(c) {
            let base = (o * c + ch) * inner;
            let mut s = 0.0;
            for j in 0..inner {
                s += match weight {
                    Some(w) => g[base + j] * w[base + j],
                    None => g[base + j],
                };
            }
            *dc += s;
        }
    }
}
