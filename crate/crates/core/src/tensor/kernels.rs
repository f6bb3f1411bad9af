//! Forward and adjoint kernels shared by the evaluation, tape and dual
//! backends. All kernels work on unbatched `[C, H, W]` images.

use super::{Result, Tensor, TensorError};

/// Spatial boundary handling for `conv2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero "same" padding.
    Zero,
    /// Periodic wrap-around padding.
    Circular,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// `c = a·b (+ c if accumulate)` for row-major matrices, with optional
/// transposition of either operand. `a` is `m×k` after transposition and `b`
/// is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Broadcast-aware binary elementwise op: shapes must match exactly, or one
/// side must hold a single element.
pub fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if b.len() == 1 {
        let y = b.data[0];
        return Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, y)).collect() });
    }
    if a.len() == 1 {
        let x = a.data[0];
        return Ok(Tensor { shape: b.shape.clone(), data: b.data.iter().map(|&y| f(x, y)).collect() });
    }
    Err(TensorError::ShapeMismatch { op, lhs: a.shape.clone(), rhs: b.shape.clone() })
}

/// Reduce a gradient of broadcast shape back onto an operand's shape.
pub fn unbroadcast(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        grad
    } else {
        Tensor { shape: shape.to_vec(), data: vec![grad.sum()] }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape.as_slice() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(TensorError::InvalidArgument { op, msg: format!("expected [C, H, W], got {:?}", s) }),
    }
}

/// `y = W x + b` for `x` of shape `[in]` or `[rows, in]` and `W` of shape
/// `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (out, inp) = match w.shape.as_slice() {
        &[o, i] => (o, i),
        s => {
            return Err(TensorError::InvalidArgument { op: "linear", msg: format!("weight shape {:?}", s) })
        }
    };
    let (rows, out_shape) = match x.shape.as_slice() {
        &[i] if i == inp => (1, vec![out]),
        &[r, i] if i == inp => (r, vec![r, out]),
        _ => return Err(TensorError::ShapeMismatch { op: "linear", lhs: x.shape.clone(), rhs: w.shape.clone() }),
    };
    let mut y = vec![0.0; rows * out];
    // y[rows, out] = x[rows, in] · W^T
    gemm(rows, inp, out, &x.data, false, &w.data, true, &mut y, false);
    if let Some(b) = b {
        if b.shape != [out] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: b.shape.clone(), rhs: vec![out] });
        }
        for row in y.chunks_mut(out) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
    Ok(Tensor { shape: out_shape, data: y })
}

/// Gradients of `linear` w.r.t. input and weight (bias gradient is the row
/// sum of `gy`).
pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let out = w.shape[0];
    let inp = w.shape[1];
    let rows = x.len() / inp;
    let mut gx = vec![0.0; rows * inp];
    gemm(rows, out, inp, &gy.data, false, &w.data, false, &mut gx, false);
    let mut gw = vec![0.0; out * inp];
    gemm(out, rows, inp, &gy.data, true, &x.data, false, &mut gw, false);
    let mut gb = vec![0.0; out];
    for row in gy.data.chunks(out) {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    (
        Tensor { shape: x.shape.clone(), data: gx },
        Tensor { shape: w.shape.clone(), data: gw },
        Tensor { shape: vec![out], data: gb },
    )
}

fn conv_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = image_dims("conv2d", x)?;
    let (c_out, kc, kh, kw) = match k.shape.as_slice() {
        &[a, b, c, d] => (a, b, c, d),
        s => {
            return Err(TensorError::InvalidArgument { op: "conv2d", msg: format!("kernel shape {:?}", s) })
        }
    };
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            msg: format!("kernel must be square with odd size, got {}x{}", kh, kw),
        });
    }
    if kc != c_in {
        return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.shape.clone(), rhs: k.shape.clone() });
    }
    if h < kh || w < kw {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            msg: format!("image {}x{} smaller than kernel {}", h, w, kh),
        });
    }
    Ok((c_in, c_out, h, w, kh))
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Unfold `[C, H, W]` into `[C·k·k, H·W]` patch columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: Padding) -> Vec<f64> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - p;
            for kx in 0..k {
                let dx = kx as isize - p;
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    match pad {
                        Padding::Circular => {
                            let src = &plane[wrap(sy, h) * w..(wrap(sy, h) + 1) * w];
                            shift_row_circular(src, out, dx);
                        }
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                            shift_row_zero(src, out, dx);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `out[x] = src[(x + dx) mod w]`
fn shift_row_circular(src: &[f64], out: &mut [f64], dx: isize) {
    let w = src.len();
    let s = wrap(dx, w);
    out[..w - s].copy_from_slice(&src[s..]);
    out[w - s..].copy_from_slice(&src[..s]);
}

/// `out[x] = src[x + dx]` or 0 when out of range.
fn shift_row_zero(src: &[f64], out: &mut [f64], dx: isize) {
    let w = src.len() as isize;
    for (x, o) in out.iter_mut().enumerate() {
        let sx = x as isize + dx;
        *o = if sx >= 0 && sx < w { src[sx as usize] } else { 0.0 };
    }
}

/// Same-size 2D convolution (cross-correlation) of `[C_in, H, W]` with a
/// `[C_out, C_in, k, k]` kernel.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, pad: Padding) -> Result<Tensor> {
    let (c_in, c_out, h, w, ks) = conv_dims(x, k)?;
    let hw = h * w;
    let mut y = vec![0.0; c_out * hw];
    if ks == 1 {
        gemm(c_out, c_in, hw, &k.data, false, &x.data, false, &mut y, false);
    } else {
        let cols = im2col(&x.data, c_in, h, w, ks, pad);
        gemm(c_out, c_in * ks * ks, hw, &k.data, false, &cols, false, &mut y, false);
    }
    if let Some(b) = bias {
        if b.shape != [c_out] {
            return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: b.shape.clone(), rhs: vec![c_out] });
        }
        for (plane, bv) in y.chunks_mut(hw).zip(&b.data) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor { shape: vec![c_out, h, w], data: y })
}

/// Gradients of `conv2d` w.r.t. input (if requested), kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    gy: &Tensor,
    pad: Padding,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, ks) = (k.shape[0], k.shape[2]);
    let hw = h * w;
    let kk = c_in * ks * ks;
    let cols_owned;
    let cols: &[f64] = if ks == 1 {
        &x.data
    } else {
        cols_owned = im2col(&x.data, c_in, h, w, ks, pad);
        &cols_owned
    };
    let mut gk = vec![0.0; c_out * kk];
    gemm(c_out, hw, kk, &gy.data, false, cols, true, &mut gk, false);
    let gb: Vec<f64> = gy.data.chunks(hw).map(|p| p.iter().sum()).collect();
    let gx = need_input.then(|| {
        let data = if ks == 1 {
            let mut g = vec![0.0; c_in * hw];
            gemm(c_in, c_out, hw, &k.data, true, &gy.data, false, &mut g, false);
            g
        } else {
            // The adjoint of a same-size correlation is the correlation of
            // the output gradient with the spatially flipped, channel-swapped
            // kernel, under the same padding.
            let mut flipped = vec![0.0; c_in * c_out * ks * ks];
            for co in 0..c_out {
                for ci in 0..c_in {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            flipped[((ci * c_out + co) * ks + ks - 1 - ky) * ks + ks - 1 - kx] =
                                k.data[((co * c_in + ci) * ks + ky) * ks + kx];
                        }
                    }
                }
            }
            let gcols = im2col(&gy.data, c_out, h, w, ks, pad);
            let mut g = vec![0.0; c_in * hw];
            gemm(c_in, c_out * ks * ks, hw, &flipped, false, &gcols, false, &mut g, false);
            g
        };
        Tensor { shape: x.shape.clone(), data }
    });
    (gx, Tensor { shape: k.shape.clone(), data: gk }, Tensor { shape: vec![c_out], data: gb })
}

/// Saved statistics of a group-norm evaluation.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<(Tensor, GroupNormCache)> {
    let (c, h, w) = image_dims("group_norm", x)?;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::InvalidArgument {
            op: "group_norm",
            msg: format!("{} groups do not divide {} channels", groups, c),
        });
    }
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(TensorError::ShapeMismatch { op: "group_norm", lhs: gamma.shape.clone(), rhs: vec![c] });
    }
    let hw = h * w;
    let span = (c / groups) * hw;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let src = &x.data[g * span..(g + 1) * span];
        let mean = src.iter().sum::<f64>() / span as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
        let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for (d, v) in xhat[g * span..(g + 1) * span].iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    for (ch, plane) in y.chunks_mut(hw).enumerate() {
        let (s, b) = (gamma.data[ch], beta.data[ch]);
        plane.iter_mut().for_each(|v| *v = *v * s + b);
    }
    let normalized = Tensor { shape: x.shape.clone(), data: xhat };
    Ok((Tensor { shape: x.shape.clone(), data: y }, GroupNormCache { normalized, inv_std, groups }))
}

/// Given a perturbation `d` of the group-norm input, the matching
/// perturbation of the normalized values `x̂`. The same expression is the
/// adjoint map used in the backward pass, because the Jacobian of `x̂` is
/// symmetric.
pub fn group_norm_normalized_tangent(cache: &GroupNormCache, d: &Tensor) -> Tensor {
    let span = d.len() / cache.groups;
    let xh = &cache.normalized.data;
    let mut out = vec![0.0; d.len()];
    for g in 0..cache.groups {
        let r = g * span..(g + 1) * span;
        let dg = &d.data[r.clone()];
        let xg = &xh[r.clone()];
        let mean_d = dg.iter().sum::<f64>() / span as f64;
        let mean_dx = dg.iter().zip(xg).map(|(a, b)| a * b).sum::<f64>() / span as f64;
        let is = cache.inv_std[g];
        for ((o, a), b) in out[r].iter_mut().zip(dg).zip(xg) {
            *o = is * (a - mean_d - b * mean_dx);
        }
    }
    Tensor { shape: d.shape.clone(), data: out }
}

/// Per-channel reduction of `a ⊙ b` over the spatial axes.
pub fn channel_dot(a: &Tensor, b: &Tensor, c: usize) -> Tensor {
    let hw = a.len() / c;
    let data = a
        .data
        .chunks(hw)
        .zip(b.data.chunks(hw))
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u * v).sum())
        .collect();
    Tensor { shape: vec![c], data }
}

pub fn channel_sum(a: &Tensor, c: usize) -> Tensor {
    let hw = a.len() / c;
    Tensor { shape: vec![c], data: a.data.chunks(hw).map(|p| p.iter().sum()).collect() }
}

/// Multiply each channel plane by `s[c]` and add `b[c]` (either optional).
pub fn channel_scale_shift(x: &Tensor, s: Option<&[f64]>, b: Option<&[f64]>) -> Tensor {
    let c = x.shape[0];
    let hw = x.len() / c;
    let mut y = x.data.clone();
    for (ch, plane) in y.chunks_mut(hw).enumerate() {
        let sv = s.map_or(1.0, |s| s[ch]);
        let bv = b.map_or(0.0, |b| b[ch]);
        plane.iter_mut().for_each(|v| *v = *v * sv + bv);
    }
    Tensor { shape: x.shape.clone(), data: y }
}

/// FiLM modulation `x·(1 + scale_c) + shift_c`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (c, _, _) = image_dims("channel_affine", x)?;
    if scale.shape != [c] || shift.shape != [c] {
        return Err(TensorError::ShapeMismatch { op: "channel_affine", lhs: scale.shape.clone(), rhs: vec![c] });
    }
    let s: Vec<f64> = scale.data.iter().map(|v| 1.0 + v).collect();
    Ok(channel_scale_shift(x, Some(&s), Some(&shift.data)))
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::InvalidArgument {
        op: "concat_channels",
        msg: "nothing to concatenate".into(),
    })?;
    let (_, h, w) = image_dims("concat_channels", first)?;
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pc, ph, pw) = image_dims("concat_channels", p)?;
        if (ph, pw) != (h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        c += pc;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor { shape: vec![c, h, w], data })
}

pub fn split_channels(g: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let (h, w) = (g.shape[1], g.shape[2]);
    let mut off = 0;
    sizes
        .iter()
        .map(|&c| {
            let t = Tensor { shape: vec![c, h, w], data: g.data[off..off + c * h * w].to_vec() };
            off += c * h * w;
            t
        })
        .collect()
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims("upsample2", x)?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for yy in 0..h2 {
            let src = &x.data[(ch * h + yy / 2) * w..(ch * h + yy / 2 + 1) * w];
            let dst = &mut y[(ch * h2 + yy) * w2..(ch * h2 + yy + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    Ok(Tensor { shape: vec![c, h2, w2], data: y })
}

pub fn upsample2_adjoint(g: &Tensor) -> Tensor {
    let (c, h2, w2) = (g.shape[0], g.shape[1], g.shape[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for yy in 0..h2 {
            let src = &g.data[(ch * h2 + yy) * w2..(ch * h2 + yy + 1) * w2];
            let dst = &mut x[(ch * h + yy / 2) * w..(ch * h + yy / 2 + 1) * w];
            for (xx, v) in src.iter().enumerate() {
                dst[xx / 2] += v;
            }
        }
    }
    Tensor { shape: vec![c, h, w], data: x }
}

/// Nearest-neighbour ×2 downsampling (keeps the even-indexed pixels).
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims("downsample2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "downsample2",
            msg: format!("odd spatial size {}x{}", h, w),
        });
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        for yy in 0..h2 {
            let row = &x.data[(ch * h + 2 * yy) * w..(ch * h + 2 * yy + 1) * w];
            y.extend(row.iter().step_by(2));
        }
    }
    Ok(Tensor { shape: vec![c, h2, w2], data: y })
}

pub fn downsample2_adjoint(g: &Tensor) -> Tensor {
    let (c, h2, w2) = (g.shape[0], g.shape[1], g.shape[2]);
    let (h, w) = (2 * h2, 2 * w2);
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                x[(ch * h + 2 * yy) * w + 2 * xx] = g.data[(ch * h2 + yy) * w2 + xx];
            }
        }
    }
    Tensor { shape: vec![c, h, w], data: x }
}
