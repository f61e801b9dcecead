//! Flat-buffer numeric kernels shared by the tape ops.
//!
//! All reductions accumulate in a fixed order so that repeated runs are bit
//! for bit identical.

/// `out[m×p] += a[m×n] · b[n×p]`, row-major.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Swaps the last two axes of a `[batch, rows, cols]` buffer.
pub fn swap_last2(a: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    let block = rows * cols;
    for b in 0..batch {
        let src = &a[b * block..(b + 1) * block];
        let dst = &mut out[b * block..(b + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}

/// Zero-padded "same" depthwise cross-correlation on `[B, C, H, W]` with a
/// `[C, k, k]` kernel.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_forward(
    x: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * h * w;
            let kern = &kernel[c * k * k..(c + 1) * k * k];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let ii = i as isize + u as isize - pad;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let jj = j as isize + v as isize - pad;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            acc += kern[u * k + v] * x[base + ii as usize * w + jj as usize];
                        }
                    }
                    out[base + i * w + j] += acc;
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f64],
    kernel: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    gk: &mut [f64],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * h * w;
            for i in 0..h {
                for j in 0..w {
                    let g = gy[base + i * w + j];
                    if g == 0.0 {
                        continue;
                    }
                    for u in 0..k {
                        let ii = i as isize + u as isize - pad;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let jj = j as isize + v as isize - pad;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let xi = base + ii as usize * w + jj as usize;
                            gx[xi] += g * kernel[c * k * k + u * k + v];
                            gk[c * k * k + u * k + v] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}
