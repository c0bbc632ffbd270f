//! Forward kernels and their exact reverse-mode gradients.
//!
//! Layout conventions (channels-first, contiguous):
//!
//! * conv input:  `[C_in, L]` or `[B, C_in, L]`
//! * conv kernel: `[C_out, C_in, K]`, cross-correlation (no flip)
//! * dense input: `[B, F_in]`, weight `[F_out, F_in]`
//!
//! Storage is `f32`; every reduction (dot products, batch statistics,
//! pooled means, losses) accumulates in `f64` before rounding once at the
//! end. Reduction order per output element is fixed, so results are
//! identical whether or not the rayon paths kick in.

use rayon::prelude::*;

use crate::tensor::{ShapeError, Tensor};

/// Work size (in multiply-accumulates) above which ops parallelize.
const PAR_THRESHOLD: usize = 1 << 15;

// ── 1-D convolution ──────────────────────────────────────────────────

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(l: usize, k: usize, stride: usize, padding: usize) -> usize {
    (l + 2 * padding - k) / stride + 1
}

/// (batch, c_in, l, c_out, k, l_out, batched)
type ConvDims = (usize, usize, usize, usize, usize, usize, bool);

fn conv1d_check(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims, ShapeError> {
    if kernel.rank() != 3 {
        return Err(ShapeError::new(
            "conv1d",
            format!("kernel must be [C_out, C_in, K], got {:?}", kernel.shape()),
        ));
    }
    let (c_out, kc_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let (batch, c_in, l, batched) = match input.rank() {
        2 => (1, input.shape()[0], input.shape()[1], false),
        3 => (input.shape()[0], input.shape()[1], input.shape()[2], true),
        _ => {
            return Err(ShapeError::new(
                "conv1d",
                format!("input must be [C_in, L] or [B, C_in, L], got {:?}", input.shape()),
            ))
        }
    };
    if c_in != kc_in {
        return Err(ShapeError::new(
            "conv1d",
            format!("input channels {} do not match kernel C_in {}", c_in, kc_in),
        ));
    }
    if stride == 0 {
        return Err(ShapeError::new("conv1d", "stride must be >= 1"));
    }
    if k > l + 2 * padding {
        return Err(ShapeError::new(
            "conv1d",
            format!("kernel size {} exceeds padded length {}", k, l + 2 * padding),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(ShapeError::new(
                "conv1d",
                format!("bias shape {:?} does not match C_out {}", b.shape(), c_out),
            ));
        }
    }
    Ok((batch, c_in, l, c_out, k, conv1d_out_len(l, k, stride, padding), batched))
}

fn to_f64(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

/// Widen rows of `[rows, l]` into `[rows, l + 2*pad]` with zero padding,
/// so stride-1 kernels never branch on boundaries.
fn pad_rows_f64(data: &[f32], rows: usize, l: usize, pad: usize) -> Vec<f64> {
    let width = l + 2 * pad;
    let mut out = vec![0.0f64; rows * width];
    for r in 0..rows {
        let src = &data[r * l..][..l];
        let dst = &mut out[r * width + pad..][..l];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s as f64;
        }
    }
    out
}

/// Output tile width for the register-blocked stride-1 kernels.
const TILE: usize = 8;

/// Monomorphized core of [`corr_rows_tiled`]: the fixed tap count lets
/// the compiler unroll the kernel loop and keep the tile in registers.
#[inline]
fn corr_rows_tiled_k<const K: usize>(
    acc: &mut [f64],
    padded: &[f64],
    padded_width: usize,
    weights: &[f64],
    c_in: usize,
) {
    let l_out = acc.len();
    let mut lo = 0;
    while lo + TILE <= l_out {
        let mut tile = [0.0f64; TILE];
        for ci in 0..c_in {
            let row = &padded[ci * padded_width + lo..][..K - 1 + TILE];
            let w_row = &weights[ci * K..][..K];
            for kk in 0..K {
                let wv = w_row[kk];
                for t in 0..TILE {
                    tile[t] += wv * row[kk + t];
                }
            }
        }
        for (a, t) in acc[lo..lo + TILE].iter_mut().zip(tile.iter()) {
            *a += t;
        }
        lo += TILE;
    }
    while lo < l_out {
        let mut v = 0.0f64;
        for ci in 0..c_in {
            let row = &padded[ci * padded_width + lo..][..K];
            let w_row = &weights[ci * K..][..K];
            for kk in 0..K {
                v += w_row[kk] * row[kk];
            }
        }
        acc[lo] += v;
        lo += 1;
    }
}

/// out[lo] = sum_taps w[tap] * padded[lo + tap] for lo in 0..l_out, with
/// `taps` spanning a whole [C_in, K] kernel against a padded input row
/// block. Accumulates into `acc` (caller adds bias / writes back).
#[inline]
fn corr_rows_tiled(
    acc: &mut [f64],
    padded: &[f64],
    padded_width: usize,
    weights: &[f64],
    c_in: usize,
    k: usize,
) {
    match k {
        1 => corr_rows_tiled_k::<1>(acc, padded, padded_width, weights, c_in),
        2 => corr_rows_tiled_k::<2>(acc, padded, padded_width, weights, c_in),
        3 => corr_rows_tiled_k::<3>(acc, padded, padded_width, weights, c_in),
        5 => corr_rows_tiled_k::<5>(acc, padded, padded_width, weights, c_in),
        7 => corr_rows_tiled_k::<7>(acc, padded, padded_width, weights, c_in),
        9 => corr_rows_tiled_k::<9>(acc, padded, padded_width, weights, c_in),
        _ => {
            let l_out = acc.len();
            for (lo, a) in acc.iter_mut().enumerate().take(l_out) {
                let mut v = 0.0f64;
                for ci in 0..c_in {
                    let row = &padded[ci * padded_width + lo..][..k];
                    let w_row = &weights[ci * k..][..k];
                    for kk in 0..k {
                        v += w_row[kk] * row[kk];
                    }
                }
                *a += v;
            }
        }
    }
}

/// All `K` shifted dot products of `dy` against a padded row in one
/// pass: out[kk] += sum_lo dy[lo] * xp[lo + kk].
#[inline]
fn corr_dots_k<const K: usize>(dy: &[f64], xp: &[f64], out: &mut [f64]) {
    const W: usize = 4;
    let l_out = dy.len();
    let mut acc = [[0.0f64; W]; K];
    let chunks = l_out / W;
    for c in 0..chunks {
        let d = &dy[c * W..c * W + W];
        let base = &xp[c * W..c * W + W + K - 1];
        for kk in 0..K {
            let x = &base[kk..kk + W];
            for t in 0..W {
                acc[kk][t] += d[t] * x[t];
            }
        }
    }
    for kk in 0..K {
        let mut total = acc[kk].iter().sum::<f64>();
        for lo in chunks * W..l_out {
            total += dy[lo] * xp[lo + kk];
        }
        out[kk] += total;
    }
}

/// Dispatching wrapper over [`corr_dots_k`].
#[inline]
fn corr_dots(dy: &[f64], xp: &[f64], out: &mut [f64], k: usize) {
    match k {
        1 => corr_dots_k::<1>(dy, xp, out),
        2 => corr_dots_k::<2>(dy, xp, out),
        3 => corr_dots_k::<3>(dy, xp, out),
        5 => corr_dots_k::<5>(dy, xp, out),
        7 => corr_dots_k::<7>(dy, xp, out),
        9 => corr_dots_k::<9>(dy, xp, out),
        _ => {
            for (kk, slot) in out.iter_mut().enumerate().take(k) {
                let mut acc = 0.0f64;
                for (lo, &d) in dy.iter().enumerate() {
                    acc += d * xp[lo + kk];
                }
                *slot += acc;
            }
        }
    }
}

/// Cross-correlation of `input` with `kernel` plus optional bias.
pub fn conv1d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor, ShapeError> {
    let (batch, c_in, l, c_out, k, l_out, batched) =
        conv1d_check(input, kernel, bias, stride, padding)?;
    let w = to_f64(kernel.data());
    let mut out = vec![0.0f32; batch * c_out * l_out];
    let work = batch * c_out * l_out * c_in * k;

    if stride == 1 {
        // Zero-padded rows + register-tiled output blocks.
        let padded = pad_rows_f64(input.data(), batch * c_in, l, padding);
        let width = l + 2 * padding;
        let row = |buf: &mut [f32], bi: usize, co: usize| {
            let mut acc = vec![0.0f64; l_out];
            let in_block = &padded[bi * c_in * width..][..c_in * width];
            let w_block = &w[co * c_in * k..][..c_in * k];
            corr_rows_tiled(&mut acc, in_block, width, w_block, c_in, k);
            let b = bias.map(|b| b.data()[co] as f64).unwrap_or(0.0);
            for (o, a) in buf.iter_mut().zip(acc.iter()) {
                *o = (a + b) as f32;
            }
        };
        if work >= PAR_THRESHOLD {
            out.par_chunks_mut(l_out).enumerate().for_each(|(idx, buf)| {
                row(buf, idx / c_out, idx % c_out);
            });
        } else {
            for (idx, buf) in out.chunks_mut(l_out).enumerate() {
                row(buf, idx / c_out, idx % c_out);
            }
        }
    } else {
        let x = to_f64(input.data());
        let row = |buf: &mut [f32], bi: usize, co: usize| {
            let mut acc = vec![0.0f64; l_out];
            for ci in 0..c_in {
                let in_row = &x[(bi * c_in + ci) * l..][..l];
                let w_row = &w[(co * c_in + ci) * k..][..k];
                accumulate_corr(&mut acc, in_row, w_row, stride, padding, l_out);
            }
            let b = bias.map(|b| b.data()[co] as f64).unwrap_or(0.0);
            for (o, a) in buf.iter_mut().zip(acc.iter()) {
                *o = (a + b) as f32;
            }
        };
        if work >= PAR_THRESHOLD {
            out.par_chunks_mut(l_out).enumerate().for_each(|(idx, buf)| {
                row(buf, idx / c_out, idx % c_out);
            });
        } else {
            for (idx, buf) in out.chunks_mut(l_out).enumerate() {
                row(buf, idx / c_out, idx % c_out);
            }
        }
    }

    let shape = if batched { vec![batch, c_out, l_out] } else { vec![c_out, l_out] };
    Tensor::from_vec(shape, out)
}

/// acc[lo] += sum_k w[k] * in[lo*stride + k - padding], skipping out-of-range taps.
fn accumulate_corr(
    acc: &mut [f64],
    in_row: &[f64],
    w_row: &[f64],
    stride: usize,
    padding: usize,
    l_out: usize,
) {
    let l = in_row.len();
    if stride == 1 {
        for (kk, &wv) in w_row.iter().enumerate() {
            let lo_start = padding.saturating_sub(kk);
            let lo_end = (l + padding).saturating_sub(kk).min(l_out);
            if lo_start >= lo_end {
                continue;
            }
            let li_start = lo_start + kk - padding;
            let n = lo_end - lo_start;
            for (a, &xv) in acc[lo_start..lo_end].iter_mut().zip(&in_row[li_start..li_start + n]) {
                *a += wv * xv;
            }
        }
    } else {
        for (lo, a) in acc.iter_mut().enumerate().take(l_out) {
            let base = lo * stride;
            for (kk, &wv) in w_row.iter().enumerate() {
                let li = base + kk;
                if li < padding || li - padding >= l {
                    continue;
                }
                *a += wv * in_row[li - padding];
            }
        }
    }
}

/// Which gradients a backward call must produce. Skipping unused ones
/// (a constant data input, a deterministic bias) avoids dead work.
#[derive(Debug, Clone, Copy)]
pub struct GradWants {
    pub input: bool,
    pub kernel: bool,
    pub bias: bool,
}

/// Gradients of [`conv1d`] with respect to input, kernel, and bias.
pub fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    d_out: &Tensor,
    stride: usize,
    padding: usize,
    wants: GradWants,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let batched = input.rank() == 3;
    let (batch, l) = if batched {
        (input.shape()[0], input.shape()[2])
    } else {
        (1, input.shape()[1])
    };
    let l_out = conv1d_out_len(l, k, stride, padding);
    let dy = to_f64(d_out.data());
    let work = batch * c_out * l_out * c_in * k;

    // Fast paths need the backward padding k - 1 - padding to be valid.
    let fast = stride == 1 && padding < k;

    // d_input: correlate d_out with the channel-transposed, tap-flipped
    // kernel (padding k - 1 - padding), which is algebraically the exact
    // adjoint of the forward pass.
    let d_in_tensor = wants.input.then(|| {
        let w = to_f64(kernel.data());
        let mut d_in = vec![0.0f32; batch * c_in * l];
        if fast {
            let back_pad = k - 1 - padding;
            let dy_padded = pad_rows_f64(d_out.data(), batch * c_out, l_out, back_pad);
            let width = l_out + 2 * back_pad;
            // wt[ci][co][kk] = w[co][ci][k - 1 - kk]
            let mut wt = vec![0.0f64; c_in * c_out * k];
            for co in 0..c_out {
                for ci in 0..c_in {
                    for kk in 0..k {
                        wt[(ci * c_out + co) * k + kk] = w[(co * c_in + ci) * k + (k - 1 - kk)];
                    }
                }
            }
            let row = |buf: &mut [f32], bi: usize, ci: usize| {
                let mut acc = vec![0.0f64; l];
                let dy_block = &dy_padded[bi * c_out * width..][..c_out * width];
                let w_block = &wt[ci * c_out * k..][..c_out * k];
                corr_rows_tiled(&mut acc, dy_block, width, w_block, c_out, k);
                for (o, a) in buf.iter_mut().zip(acc.iter()) {
                    *o = *a as f32;
                }
            };
            if work >= PAR_THRESHOLD {
                d_in.par_chunks_mut(l).enumerate().for_each(|(idx, buf)| {
                    row(buf, idx / c_in, idx % c_in);
                });
            } else {
                for (idx, buf) in d_in.chunks_mut(l).enumerate() {
                    row(buf, idx / c_in, idx % c_in);
                }
            }
        } else {
            let in_row_grad = |buf: &mut [f32], bi: usize, ci: usize| {
                let mut acc = vec![0.0f64; l];
                for co in 0..c_out {
                    let dy_row = &dy[(bi * c_out + co) * l_out..][..l_out];
                    let w_row = &w[(co * c_in + ci) * k..][..k];
                    for (lo, &g) in dy_row.iter().enumerate() {
                        let base = lo * stride;
                        for (kk, &wv) in w_row.iter().enumerate() {
                            let li = base + kk;
                            if li < padding || li - padding >= l {
                                continue;
                            }
                            acc[li - padding] += wv * g;
                        }
                    }
                }
                for (o, a) in buf.iter_mut().zip(acc.iter()) {
                    *o = *a as f32;
                }
            };
            if work >= PAR_THRESHOLD {
                d_in.par_chunks_mut(l).enumerate().for_each(|(idx, buf)| {
                    in_row_grad(buf, idx / c_in, idx % c_in);
                });
            } else {
                for (idx, buf) in d_in.chunks_mut(l).enumerate() {
                    in_row_grad(buf, idx / c_in, idx % c_in);
                }
            }
        }
        Tensor::from_vec(input.shape().to_vec(), d_in).expect("input grad shape")
    });

    // d_kernel: per output channel, dot d_out rows against shifted input rows.
    let d_w_tensor = wants.kernel.then(|| {
        let mut d_w = vec![0.0f32; c_out * c_in * k];
        if fast {
            let padded = pad_rows_f64(input.data(), batch * c_in, l, padding);
            let width = l + 2 * padding;
            let kernel_grad = |buf: &mut [f32], co: usize| {
                for ci in 0..c_in {
                    let mut acc = vec![0.0f64; k];
                    for bi in 0..batch {
                        let dy_row = &dy[(bi * c_out + co) * l_out..][..l_out];
                        let xp_row = &padded[(bi * c_in + ci) * width..][..width];
                        corr_dots(dy_row, xp_row, &mut acc, k);
                    }
                    for (kk, &a) in acc.iter().enumerate() {
                        buf[ci * k + kk] = a as f32;
                    }
                }
            };
            if work >= PAR_THRESHOLD {
                d_w.par_chunks_mut(c_in * k).enumerate().for_each(|(co, buf)| kernel_grad(buf, co));
            } else {
                for (co, buf) in d_w.chunks_mut(c_in * k).enumerate() {
                    kernel_grad(buf, co);
                }
            }
        } else {
            let x = to_f64(input.data());
            let kernel_grad = |buf: &mut [f32], co: usize| {
                for ci in 0..c_in {
                    for kk in 0..k {
                        let mut acc = 0.0f64;
                        for bi in 0..batch {
                            let dy_row = &dy[(bi * c_out + co) * l_out..][..l_out];
                            let in_row = &x[(bi * c_in + ci) * l..][..l];
                            for (lo, &g) in dy_row.iter().enumerate() {
                                let li = lo * stride + kk;
                                if li < padding || li - padding >= l {
                                    continue;
                                }
                                acc += g * in_row[li - padding];
                            }
                        }
                        buf[ci * k + kk] = acc as f32;
                    }
                }
            };
            if work >= PAR_THRESHOLD {
                d_w.par_chunks_mut(c_in * k).enumerate().for_each(|(co, buf)| kernel_grad(buf, co));
            } else {
                for (co, buf) in d_w.chunks_mut(c_in * k).enumerate() {
                    kernel_grad(buf, co);
                }
            }
        }
        Tensor::from_vec(vec![c_out, c_in, k], d_w).expect("kernel grad shape")
    });

    let d_bias = wants.bias.then(|| {
        let mut d_b = vec![0.0f32; c_out];
        for (co, slot) in d_b.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for bi in 0..batch {
                for &g in &dy[(bi * c_out + co) * l_out..][..l_out] {
                    acc += g;
                }
            }
            *slot = acc as f32;
        }
        Tensor::from_vec(vec![c_out], d_b).expect("bias grad shape")
    });

    (d_in_tensor, d_w_tensor, d_bias)
}

// ── Max pooling ──────────────────────────────────────────────────────

/// Windowed max over the last axis. Returns the output and, per output
/// element, the absolute in-row index of the (first) maximum.
pub fn maxpool1d(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<u32>), ShapeError> {
    let (rows, l, shape) = match input.rank() {
        2 => (input.shape()[0], input.shape()[1], &input.shape()[..1]),
        3 => (input.shape()[0] * input.shape()[1], input.shape()[2], &input.shape()[..2]),
        _ => {
            return Err(ShapeError::new(
                "maxpool1d",
                format!("input must be rank 2 or 3, got {:?}", input.shape()),
            ))
        }
    };
    if window == 0 || stride == 0 {
        return Err(ShapeError::new("maxpool1d", "window and stride must be >= 1"));
    }
    if window > l {
        return Err(ShapeError::new(
            "maxpool1d",
            format!("window {} exceeds input length {}", window, l),
        ));
    }
    let l_out = (l - window) / stride + 1;
    let x = input.data();
    let mut out = vec![0.0f32; rows * l_out];
    let mut argmax = vec![0u32; rows * l_out];
    for r in 0..rows {
        let row = &x[r * l..][..l];
        for lo in 0..l_out {
            let start = lo * stride;
            let mut best = row[start];
            let mut best_i = start;
            for (off, &v) in row[start..start + window].iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = start + off;
                }
            }
            out[r * l_out + lo] = best;
            argmax[r * l_out + lo] = best_i as u32;
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(l_out);
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

/// Routes each output gradient to the argmax position recorded forward.
pub fn maxpool1d_backward(d_out: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Tensor {
    let l = *input_shape.last().unwrap();
    let rows: usize = input_shape[..input_shape.len() - 1].iter().product();
    let l_out = *d_out.shape().last().unwrap();
    let dy = d_out.data();
    let mut d_in = vec![0.0f32; rows * l];
    for r in 0..rows {
        for lo in 0..l_out {
            let li = argmax[r * l_out + lo] as usize;
            d_in[r * l + li] += dy[r * l_out + lo];
        }
    }
    Tensor::from_vec(input_shape.to_vec(), d_in).expect("maxpool grad shape")
}

// ── Softplus ─────────────────────────────────────────────────────────

/// Overflow-safe `ln(1 + exp(x))` on a single value.
#[inline]
pub fn softplus_scalar(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the softplus derivative.
#[inline]
pub fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise softplus.
pub fn softplus(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| softplus_scalar(v)).collect();
    Tensor::from_vec(input.shape().to_vec(), data).expect("softplus shape")
}

pub fn softplus_backward(input: &Tensor, d_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| g * logistic(x))
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data).expect("softplus grad shape")
}

// ── Batch normalization ──────────────────────────────────────────────

/// Per-channel batch statistics captured during a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Train-mode batch normalization over `[B, C, L]` with statistics taken
/// per channel across `(B, L)`. Requires `B >= 2`.
pub fn batchnorm1d_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnStats), ShapeError> {
    let (b, c, l) = bn_dims(input, gamma, beta)?;
    if b < 2 {
        return Err(ShapeError::new(
            "batchnorm1d",
            "train mode requires batch size >= 2 (variance undefined for B = 1)",
        ));
    }
    let x = input.data();
    let n = (b * l) as f64;
    let mut stats = BnStats { mean: vec![0.0; c], var: vec![0.0; c], inv_std: vec![0.0; c] };
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for bi in 0..b {
            for &v in &x[(bi * c + ci) * l..][..l] {
                let v = v as f64;
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        stats.mean[ci] = mean;
        stats.var[ci] = var;
        stats.inv_std[ci] = 1.0 / (var + eps).sqrt();
    }
    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * l;
            let (m, is) = (stats.mean[ci], stats.inv_std[ci]);
            let (gc, bc) = (g[ci] as f64, be[ci] as f64);
            for (o, &v) in out[base..base + l].iter_mut().zip(&x[base..base + l]) {
                *o = (gc * (v as f64 - m) * is + bc) as f32;
            }
        }
    }
    Ok((Tensor::from_vec(input.shape().to_vec(), out)?, stats))
}

/// Eval-mode batch normalization using running statistics.
pub fn batchnorm1d_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f64,
) -> Result<Tensor, ShapeError> {
    let (b, c, l) = bn_dims(input, gamma, beta)?;
    let x = input.data();
    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * l;
            let m = running_mean[ci] as f64;
            let is = 1.0 / (running_var[ci] as f64 + eps).sqrt();
            let (gc, bc) = (g[ci] as f64, be[ci] as f64);
            for (o, &v) in out[base..base + l].iter_mut().zip(&x[base..base + l]) {
                *o = (gc * (v as f64 - m) * is + bc) as f32;
            }
        }
    }
    Tensor::from_vec(input.shape().to_vec(), out)
}

fn bn_dims(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize), ShapeError> {
    if input.rank() != 3 {
        return Err(ShapeError::new(
            "batchnorm1d",
            format!("input must be [B, C, L], got {:?}", input.shape()),
        ));
    }
    let (b, c, l) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(ShapeError::new(
            "batchnorm1d",
            format!(
                "gamma {:?} / beta {:?} must both be [{}]",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    Ok((b, c, l))
}

/// Gradients for train-mode batch normalization.
pub fn batchnorm1d_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, l) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let n = (b * l) as f64;
    let x = input.data();
    let dy = d_out.data();
    let mut d_in = vec![0.0f32; x.len()];
    let mut d_gamma = vec![0.0f32; c];
    let mut d_beta = vec![0.0f32; c];
    for ci in 0..c {
        let (m, is) = (stats.mean[ci], stats.inv_std[ci]);
        let gc = gamma.data()[ci] as f64;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * l;
            for (&g, &v) in dy[base..base + l].iter().zip(&x[base..base + l]) {
                let xhat = (v as f64 - m) * is;
                sum_dy += g as f64;
                sum_dy_xhat += g as f64 * xhat;
            }
        }
        d_gamma[ci] = sum_dy_xhat as f32;
        d_beta[ci] = sum_dy as f32;
        let mean_dy = sum_dy / n;
        let mean_dy_xhat = sum_dy_xhat / n;
        for bi in 0..b {
            let base = (bi * c + ci) * l;
            for (o, (&g, &v)) in d_in[base..base + l]
                .iter_mut()
                .zip(dy[base..base + l].iter().zip(&x[base..base + l]))
            {
                let xhat = (v as f64 - m) * is;
                *o = (gc * is * (g as f64 - mean_dy - xhat * mean_dy_xhat)) as f32;
            }
        }
    }
    (
        Tensor::from_vec(input.shape().to_vec(), d_in).expect("bn input grad"),
        Tensor::from_vec(vec![c], d_gamma).expect("bn gamma grad"),
        Tensor::from_vec(vec![c], d_beta).expect("bn beta grad"),
    )
}

// ── Dense (affine) ───────────────────────────────────────────────────

/// `out[b, fo] = sum_fi input[b, fi] * weight[fo, fi] + bias[fo]`.
pub fn dense(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, ShapeError> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(ShapeError::new(
            "dense",
            format!("expected input [B, F_in] and weight [F_out, F_in], got {:?} / {:?}",
                input.shape(), weight.shape()),
        ));
    }
    let (b, f_in) = (input.shape()[0], input.shape()[1]);
    let (f_out, wf_in) = (weight.shape()[0], weight.shape()[1]);
    if f_in != wf_in {
        return Err(ShapeError::new(
            "dense",
            format!("input features {} do not match weight F_in {}", f_in, wf_in),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [f_out] {
            return Err(ShapeError::new(
                "dense",
                format!("bias shape {:?} does not match F_out {}", bias.shape(), f_out),
            ));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0f32; b * f_out];
    for bi in 0..b {
        let in_row = &x[bi * f_in..][..f_in];
        for fo in 0..f_out {
            let w_row = &w[fo * f_in..][..f_in];
            let mut acc = bias.map(|t| t.data()[fo] as f64).unwrap_or(0.0);
            for (&xv, &wv) in in_row.iter().zip(w_row) {
                acc += xv as f64 * wv as f64;
            }
            out[bi * f_out + fo] = acc as f32;
        }
    }
    Tensor::from_vec(vec![b, f_out], out)
}

/// Gradients of [`dense`] with respect to input, weight, and bias.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
    wants: GradWants,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, f_in) = (input.shape()[0], input.shape()[1]);
    let f_out = weight.shape()[0];
    let dy = to_f64(d_out.data());

    let d_in_tensor = wants.input.then(|| {
        let w = to_f64(weight.data());
        let mut d_in = vec![0.0f32; b * f_in];
        for bi in 0..b {
            let mut acc = vec![0.0f64; f_in];
            for fo in 0..f_out {
                let g = dy[bi * f_out + fo];
                for (a, &wv) in acc.iter_mut().zip(&w[fo * f_in..][..f_in]) {
                    *a += g * wv;
                }
            }
            for (o, a) in d_in[bi * f_in..][..f_in].iter_mut().zip(acc.iter()) {
                *o = *a as f32;
            }
        }
        Tensor::from_vec(vec![b, f_in], d_in).expect("dense input grad")
    });

    let d_w_tensor = wants.kernel.then(|| {
        let x = to_f64(input.data());
        let mut d_w = vec![0.0f32; f_out * f_in];
        for fo in 0..f_out {
            let mut acc = vec![0.0f64; f_in];
            for bi in 0..b {
                let g = dy[bi * f_out + fo];
                for (a, &xv) in acc.iter_mut().zip(&x[bi * f_in..][..f_in]) {
                    *a += g * xv;
                }
            }
            for (o, a) in d_w[fo * f_in..][..f_in].iter_mut().zip(acc.iter()) {
                *o = *a as f32;
            }
        }
        Tensor::from_vec(vec![f_out, f_in], d_w).expect("dense weight grad")
    });

    let d_bias = wants.bias.then(|| {
        let mut d_b = vec![0.0f32; f_out];
        for (fo, slot) in d_b.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for bi in 0..b {
                acc += dy[bi * f_out + fo];
            }
            *slot = acc as f32;
        }
        Tensor::from_vec(vec![f_out], d_b).expect("dense bias grad")
    });

    (d_in_tensor, d_w_tensor, d_bias)
}

// ── Global average pooling ───────────────────────────────────────────

/// Mean over the time axis: `[B, C, L] -> [B, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, ShapeError> {
    if input.rank() != 3 {
        return Err(ShapeError::new(
            "global_avg_pool",
            format!("input must be [B, C, L], got {:?}", input.shape()),
        ));
    }
    let (b, c, l) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x = input.data();
    let mut out = vec![0.0f32; b * c];
    for (row, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for &v in &x[row * l..][..l] {
            acc += v as f64;
        }
        *slot = (acc / l as f64) as f32;
    }
    Tensor::from_vec(vec![b, c], out)
}

pub fn global_avg_pool_backward(d_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let l = input_shape[2];
    let scale = 1.0 / l as f32;
    let dy = d_out.data();
    let mut d_in = vec![0.0f32; input_shape.iter().product()];
    for (row, chunk) in d_in.chunks_mut(l).enumerate() {
        let g = dy[row] * scale;
        chunk.fill(g);
    }
    Tensor::from_vec(input_shape.to_vec(), d_in).expect("gap grad shape")
}

// ── Softmax + negative log likelihood ────────────────────────────────

/// Mean negative log likelihood of two-class logits under `labels`,
/// computed with the log-sum-exp trick. Also returns per-sample softmax
/// probabilities.
pub fn softmax_nll(logits: &Tensor, labels: &[u8]) -> Result<(Tensor, Tensor), ShapeError> {
    if logits.rank() != 2 || logits.shape()[1] != 2 {
        return Err(ShapeError::new(
            "softmax_nll",
            format!("logits must be [B, 2], got {:?}", logits.shape()),
        ));
    }
    let b = logits.shape()[0];
    if labels.len() != b {
        return Err(ShapeError::new(
            "softmax_nll",
            format!("{} labels for batch of {}", labels.len(), b),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(ShapeError::new("softmax_nll", format!("label {} outside {{0, 1}}", bad)));
    }
    let z = logits.data();
    let mut probs = vec![0.0f32; 2 * b];
    let mut total = 0.0f64;
    for bi in 0..b {
        let (l0, l1) = (z[2 * bi] as f64, z[2 * bi + 1] as f64);
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let s = e0 + e1;
        probs[2 * bi] = (e0 / s) as f32;
        probs[2 * bi + 1] = (e1 / s) as f32;
        let ly = if labels[bi] == 0 { l0 } else { l1 };
        total += -(ly - m - s.ln());
    }
    let loss = Tensor::scalar((total / b as f64) as f32);
    Ok((loss, Tensor::from_vec(vec![b, 2], probs)?))
}

/// Gradient of the mean NLL with respect to the logits.
pub fn softmax_nll_backward(probs: &Tensor, labels: &[u8], d_loss: f32) -> Tensor {
    let b = probs.shape()[0];
    let p = probs.data();
    let scale = d_loss / b as f32;
    let mut d_logits = vec![0.0f32; 2 * b];
    for bi in 0..b {
        for j in 0..2 {
            let indicator = if labels[bi] as usize == j { 1.0 } else { 0.0 };
            d_logits[2 * bi + j] = scale * (p[2 * bi + j] - indicator);
        }
    }
    Tensor::from_vec(vec![b, 2], d_logits).expect("nll grad shape")
}

/// Softmax of two-class logit rows, in 64-bit for inference statistics.
pub fn softmax_rows_f64(logits: &Tensor) -> Vec<[f64; 2]> {
    let b = logits.shape()[0];
    let z = logits.data();
    (0..b)
        .map(|bi| {
            let (l0, l1) = (z[2 * bi] as f64, z[2 * bi + 1] as f64);
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            let s = e0 + e1;
            [e0 / s, e1 / s]
        })
        .collect()
}
