//! Forward kernels and their backward counterparts. Convolution is the hot
//! path and is written as shifted-row axpy/dot loops, parallel over output
//! planes; every parallel task owns a disjoint output slice and sums in a
//! fixed order, so results are deterministic for any thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tape::{OpRecord, Tape};
use super::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates, leaving them untouched.
    Infer,
}

#[inline]
fn axis_span(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = len.saturating_sub(if d > 0 { d as usize } else { 0 });
    (lo, hi)
}

fn conv_dims<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if kcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    Ok((b, cin, h, w, cout, kh))
}

/// Shape-preserving cross-correlation with zero padding `k/2`, stride 1.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "conv input")?;
    let kernel_id = tape.require_node(kernel, "conv kernel")?;
    let bias_id = tape.require_node(bias, "conv bias")?;
    let (b, cin, h, w, cout, k) = conv_dims(input, kernel, bias)?;

    let values = conv2d_forward(input.values(), kernel.values(), bias.values(), b, cin, h, w, cout, k);
    Ok(tape.output(
        vec![b, cout, h, w],
        values,
        OpRecord::Conv2d {
            input: input_id,
            kernel: kernel_id,
            bias: bias_id,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); b * cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(plane, out_plane)| {
        let batch = plane / cout;
        let oc = plane % cout;
        out_plane.fill(bias[oc]);
        for ic in 0..cin {
            let in_plane = &input[(batch * cin + ic) * hw..][..hw];
            let taps = &kernel[(oc * cin + ic) * k * k..][..k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = axis_span(h, dy);
                for kx in 0..k {
                    let weight = taps[ky * k + kx];
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = axis_span(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let src = ((y as isize + dy) as usize) * w;
                        let dst = y * w;
                        let irow = &in_plane[src + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                        let orow = &mut out_plane[dst + x_lo..dst + x_hi];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o = *o + weight * i;
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(
    g: &[T],
    kernel: &[T],
    input_shape: &[usize],
    kernel_shape: &[usize],
) -> Vec<T> {
    let (b, cin, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (cout, k) = (kernel_shape[0], kernel_shape[2]);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut din = vec![T::zero(); b * cin * hw];
    din.par_chunks_mut(hw).enumerate().for_each(|(plane, din_plane)| {
        let batch = plane / cin;
        let ic = plane % cin;
        for oc in 0..cout {
            let g_plane = &g[(batch * cout + oc) * hw..][..hw];
            let taps = &kernel[(oc * cin + ic) * k * k..][..k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = axis_span(h, dy);
                for kx in 0..k {
                    let weight = taps[ky * k + kx];
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = axis_span(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    // Forward read in[y+dy][x+dx]; scatter the gradient back.
                    for y in y_lo..y_hi {
                        let dst = ((y as isize + dy) as usize) * w;
                        let src = y * w;
                        let grow = &g_plane[src + x_lo..src + x_hi];
                        let drow = &mut din_plane[dst + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                        for (d, &gi) in drow.iter_mut().zip(grow) {
                            *d = *d + weight * gi;
                        }
                    }
                }
            }
        }
    });
    din
}

pub(crate) fn conv2d_grad_kernel<T: Scalar>(
    g: &[T],
    input: &[T],
    input_shape: &[usize],
    kernel_shape: &[usize],
) -> Vec<T> {
    let (b, cin, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (cout, k) = (kernel_shape[0], kernel_shape[2]);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut dk = vec![T::zero(); cout * cin * k * k];
    dk.par_chunks_mut(k * k).enumerate().for_each(|(pair, taps)| {
        let oc = pair / cin;
        let ic = pair % cin;
        for batch in 0..b {
            let g_plane = &g[(batch * cout + oc) * hw..][..hw];
            let in_plane = &input[(batch * cin + ic) * hw..][..hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = axis_span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = axis_span(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let src = ((y as isize + dy) as usize) * w;
                        let grow = &g_plane[y * w + x_lo..y * w + x_hi];
                        let irow = &in_plane[src + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                        for (&gi, &ii) in grow.iter().zip(irow) {
                            acc = acc + gi * ii;
                        }
                    }
                    taps[ky * k + kx] = taps[ky * k + kx] + acc;
                }
            }
        }
    });
    dk
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(g: &[T], input_shape: &[usize], kernel_shape: &[usize]) -> Vec<T> {
    let (b, h, w) = (input_shape[0], input_shape[2], input_shape[3]);
    let cout = kernel_shape[0];
    let hw = h * w;
    let mut db = vec![T::zero(); cout];
    for batch in 0..b {
        for (oc, slot) in db.iter_mut().enumerate() {
            let plane = &g[(batch * cout + oc) * hw..][..hw];
            for &gi in plane {
                *slot = *slot + gi;
            }
        }
    }
    db
}

/// Per-channel batch normalization over (batch, height, width), ε = 1e-5.
/// Train mode uses batch statistics and updates the running estimates with
/// the given momentum; infer mode reads the running estimates.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
    momentum: T,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "batch-norm input")?;
    let gamma_id = tape.require_node(gamma, "batch-norm gamma")?;
    let beta_id = tape.require_node(beta, "batch-norm beta")?;
    let (b, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch-norm parameters must have {c} channels"
        )));
    }
    let n = b * h * w;
    if n == 0 {
        return Err(Error::ShapeMismatch("batch-norm over a zero-size batch".into()));
    }

    let hw = h * w;
    let x = input.values();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut out = vec![T::zero(); x.len()];

    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = 0.0f64;
                for batch in 0..b {
                    let plane = &x[(batch * c + ch) * hw..][..hw];
                    for &v in plane {
                        sum += v.to_f64();
                    }
                }
                let mean = sum / n as f64;
                let mut sq = 0.0f64;
                for batch in 0..b {
                    let plane = &x[(batch * c + ch) * hw..][..hw];
                    for &v in plane {
                        let d = v.to_f64() - mean;
                        sq += d * d;
                    }
                }
                let var = sq / n as f64;
                let m = momentum.to_f64();
                running_mean[ch] = T::from_f64(m * running_mean[ch].to_f64() + (1.0 - m) * mean);
                running_var[ch] = T::from_f64(m * running_var[ch].to_f64() + (1.0 - m) * var);
                (mean, var)
            }
            BnMode::Infer => (running_mean[ch].to_f64(), running_var[ch].to_f64()),
        };
        let istd = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[ch] = T::from_f64(istd);
        let (mean_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
        let (g, be) = (gamma.values()[ch], beta.values()[ch]);
        for batch in 0..b {
            let base = (batch * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean_t) * istd_t;
                xhat[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }

    Ok(tape.output(
        vec![b, c, h, w],
        out,
        OpRecord::BatchNorm {
            input: input_id,
            gamma: gamma_id,
            beta: beta_id,
            xhat: Arc::new(xhat),
            inv_std,
            mode,
        },
    ))
}

pub(crate) fn batch_norm_grads<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    input_shape: &[usize],
    mode: BnMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];

    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for batch in 0..b {
            let base = (batch * c + ch) * hw;
            for i in base..base + hw {
                sum_g += g[i].to_f64();
                sum_gx += g[i].to_f64() * xhat[i].to_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_gx);
        dbeta[ch] = T::from_f64(sum_g);
        let scale = gamma[ch] * inv_std[ch];
        match mode {
            BnMode::Train => {
                let mean_g = T::from_f64(sum_g / n);
                let mean_gx = T::from_f64(sum_gx / n);
                for batch in 0..b {
                    let base = (batch * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = scale * (g[i] - mean_g - xhat[i] * mean_gx);
                    }
                }
            }
            BnMode::Infer => {
                for batch in 0..b {
                    let base = (batch * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = scale * g[i];
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Scalar>(tape: &mut Tape<T>, input: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "leaky-relu input")?;
    let values = input
        .values()
        .iter()
        .map(|&x| if x >= T::zero() { x } else { slope * x })
        .collect();
    Ok(tape.output(
        input.shape().to_vec(),
        values,
        OpRecord::LeakyRelu {
            input: input_id,
            slope,
        },
    ))
}

/// 2x2 window max, stride 2. Ties route the gradient to the first window
/// element in row-major order.
pub fn max_pool_2x2<T: Scalar>(tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "max-pool input")?;
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max-pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let x = input.values();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok(tape.output(
        vec![b, c, oh, ow],
        out,
        OpRecord::MaxPool {
            input: input_id,
            argmax,
        },
    ))
}

/// 2x2 window mean, stride 2 (used by strided short-skip projections).
pub fn avg_pool_2x2<T: Scalar>(tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "avg-pool input")?;
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "avg-pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let x = input.values();
    let quarter = T::from_f64(0.25);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + (2 * oy) * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
            }
        }
    }
    Ok(tape.output(vec![b, c, oh, ow], out, OpRecord::AvgPool { input: input_id }))
}

pub(crate) fn avg_pool_grad<T: Scalar>(g: &[T], input_shape: &[usize]) -> Vec<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let base = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let share = g[obase + oy * ow + ox] * quarter;
                let i = base + (2 * oy) * w + 2 * ox;
                dx[i] = dx[i] + share;
                dx[i + 1] = dx[i + 1] + share;
                dx[i + w] = dx[i + w] + share;
                dx[i + w + 1] = dx[i + w + 1] + share;
            }
        }
    }
    dx
}

/// Each pixel replicated into a 2x2 block.
pub fn upsample_nearest_2x<T: Scalar>(tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "upsample input")?;
    let (b, c, h, w) = input.dims4()?;
    let x = input.values();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        let base = plane * h * w;
        let obase = plane * oh * ow;
        for y in 0..h {
            for xcol in 0..w {
                let v = x[base + y * w + xcol];
                let o = obase + (2 * y) * ow + 2 * xcol;
                out[o] = v;
                out[o + 1] = v;
                out[o + ow] = v;
                out[o + ow + 1] = v;
            }
        }
    }
    Ok(tape.output(
        vec![b, c, oh, ow],
        out,
        OpRecord::UpsampleNearest { input: input_id },
    ))
}

pub(crate) fn upsample_grad<T: Scalar>(g: &[T], input_shape: &[usize]) -> Vec<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let base = plane * h * w;
        let obase = plane * oh * ow;
        for y in 0..h {
            for xcol in 0..w {
                let o = obase + (2 * y) * ow + 2 * xcol;
                dx[base + y * w + xcol] = g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
            }
        }
    }
    dx
}

/// Stack `b`'s channels after `a`'s.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let a_id = tape.require_node(a, "concat lhs")?;
    let b_id = tape.require_node(b, "concat rhs")?;
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "concat needs matching batch/spatial dims, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let mut out = Vec::with_capacity((ca + cb) * ba * hw);
    for batch in 0..ba {
        out.extend_from_slice(&a.values()[batch * ca * hw..][..ca * hw]);
        out.extend_from_slice(&b.values()[batch * cb * hw..][..cb * hw]);
    }
    Ok(tape.output(
        vec![ba, ca + cb, ha, wa],
        out,
        OpRecord::ConcatChannels {
            a: a_id,
            b: b_id,
            a_channels: ca,
        },
    ))
}

pub(crate) fn concat_grads<T: Scalar>(
    g: &[T],
    a_shape: &[usize],
    b_shape: &[usize],
    a_channels: usize,
) -> (Vec<T>, Vec<T>) {
    let (batches, hw) = (a_shape[0], a_shape[2] * a_shape[3]);
    let cb = b_shape[1];
    let stride = (a_channels + cb) * hw;
    let mut da = Vec::with_capacity(batches * a_channels * hw);
    let mut db = Vec::with_capacity(batches * cb * hw);
    for batch in 0..batches {
        let base = batch * stride;
        da.extend_from_slice(&g[base..base + a_channels * hw]);
        db.extend_from_slice(&g[base + a_channels * hw..base + stride]);
    }
    (da, db)
}

/// Elementwise sum of two identically shaped tensors.
pub fn add<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let a_id = tape.require_node(a, "add lhs")?;
    let b_id = tape.require_node(b, "add rhs")?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add needs identical shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(tape.output(a.shape().to_vec(), values, OpRecord::Add { a: a_id, b: b_id }))
}

/// Scalar sum of all elements.
pub fn sum<T: Scalar>(tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "sum input")?;
    let mut acc = T::zero();
    for &v in input.values() {
        acc = acc + v;
    }
    Ok(tape.output(Vec::new(), vec![acc], OpRecord::Sum { input: input_id }))
}

/// Scalar dot product against fixed (non-differentiated) weights.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, input: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    let input_id = tape.require_node(input, "weighted-sum input")?;
    if weights.len() != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} elements",
            weights.len(),
            input.len()
        )));
    }
    let mut acc = T::zero();
    for (&v, &w) in input.values().iter().zip(weights) {
        acc = acc + v * w;
    }
    Ok(tape.output(
        Vec::new(),
        vec![acc],
        OpRecord::WeightedSum {
            input: input_id,
            weights: Arc::new(weights.to_vec()),
        },
    ))
}

/// Per-pixel channel softmax, no tape involvement. Layout matches the input:
/// `[B, K, H, W]`.
pub fn softmax_per_pixel<T: Scalar>(values: &[T], b: usize, k: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); values.len()];
    for batch in 0..b {
        let base = batch * k * hw;
        for pix in 0..hw {
            let mut max = values[base + pix];
            for c in 1..k {
                let v = values[base + c * hw + pix];
                if v > max {
                    max = v;
                }
            }
            let mut denom = T::zero();
            for c in 0..k {
                let e = (values[base + c * hw + pix] - max).exp();
                out[base + c * hw + pix] = e;
                denom = denom + e;
            }
            for c in 0..k {
                out[base + c * hw + pix] = out[base + c * hw + pix] / denom;
            }
        }
    }
    out
}

/// Mean over all pixels of `-log softmax(logits)[label]`, stabilized by
/// max-subtraction. Labels are class indices in row-major `[B, H, W]` order.
pub fn softmax_cross_entropy_per_pixel<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<Tensor<T>> {
    let logits_id = tape.require_node(logits, "cross-entropy logits")?;
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} pixels",
            labels.len(),
            b * hw
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Dataset(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    let softmax = softmax_per_pixel(logits.values(), b, k, h, w);
    let mut acc = 0.0f64;
    for batch in 0..b {
        let base = batch * k * hw;
        for pix in 0..hw {
            let label = labels[batch * hw + pix] as usize;
            let p = softmax[base + label * hw + pix].to_f64();
            acc -= p.max(f64::MIN_POSITIVE).ln();
        }
    }
    let loss = T::from_f64(acc / (b * hw) as f64);
    Ok(tape.output(
        Vec::new(),
        vec![loss],
        OpRecord::SoftmaxCrossEntropy {
            logits: logits_id,
            softmax: Arc::new(softmax),
            labels: Arc::new(labels.to_vec()),
        },
    ))
}

pub(crate) fn softmax_ce_grad<T: Scalar>(
    g: T,
    softmax: &[T],
    labels: &[u8],
    logits_shape: &[usize],
) -> Vec<T> {
    let (b, k, h, w) = (logits_shape[0], logits_shape[1], logits_shape[2], logits_shape[3]);
    let hw = h * w;
    let scale = g * T::from_f64(1.0 / (b * hw) as f64);
    let mut dx = vec![T::zero(); softmax.len()];
    for batch in 0..b {
        let base = batch * k * hw;
        for pix in 0..hw {
            let label = labels[batch * hw + pix] as usize;
            for c in 0..k {
                let i = base + c * hw + pix;
                let onehot = if c == label { T::one() } else { T::zero() };
                dx[i] = (softmax[i] - onehot) * scale;
            }
        }
    }
    dx
}
