//! Layer kernels as free functions. Activations are `[c, h, w]` for spatial
//! layers and `[n]` for dense outputs.

use super::{NnError, Result, Scalar, Tensor};

/// Probability floor inside the log of [`cross_entropy`].
pub const CE_FLOOR: f64 = 1e-12;

/// `floor((n + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub fn window_out(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn chw(x: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(NnError::ShapeMismatch(format!("{what} expects [c, h, w], got {s:?}"))),
    }
}

fn pad_input<T: Scalar>(x: &Tensor<T>, pad: usize) -> (Vec<T>, usize, usize) {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if pad == 0 {
        return (x.data().to_vec(), h, w);
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for i in 0..h {
            let src = &x.data()[(ch * h + i) * w..(ch * h + i + 1) * w];
            let dst = (ch * hp + i + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    (out, hp, wp)
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = chw(x, "conv2d")?;
    let (c_out, wc, kh, kw) = match *weight.shape() {
        [o, c, kh, kw] => (o, c, kh, kw),
        ref s => return Err(NnError::ShapeMismatch(format!("conv weight must be rank 4, got {s:?}"))),
    };
    if wc != c_in {
        return Err(NnError::ShapeMismatch(format!(
            "conv weight expects {wc} input channels, input has {c_in}"
        )));
    }
    let ho = window_out(h, kh, stride, padding)
        .ok_or_else(|| NnError::ShapeMismatch(format!("kernel {kh} does not fit height {h} (pad {padding})")))?;
    let wo = window_out(w, kw, stride, padding)
        .ok_or_else(|| NnError::ShapeMismatch(format!("kernel {kw} does not fit width {w} (pad {padding})")))?;
    Ok((c_in, h, w, c_out, kh, kw, ho, wo))
}

/// Cross-correlation: `out[o,i,j] = b[o] + Σ w[o,c,u,v] · xpad[c, i·s+u, j·s+v]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, _, _, c_out, kh, kw, ho, wo) = conv_geometry(x, weight, stride, padding)?;
    if bias.shape() != [c_out] {
        return Err(NnError::ShapeMismatch(format!("conv bias {:?} for {c_out} outputs", bias.shape())));
    }
    let (xp, hp, wp) = pad_input(x, padding);
    let wd = weight.data();
    let mut out = vec![T::zero(); c_out * ho * wo];
    for o in 0..c_out {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.fill(bias.data()[o]);
        for c in 0..c_in {
            let xc = &xp[c * hp * wp..(c + 1) * hp * wp];
            for u in 0..kh {
                for v in 0..kw {
                    let wv = wd[((o * c_in + c) * kh + u) * kw + v];
                    for i in 0..ho {
                        let row = &xc[(i * stride + u) * wp + v..];
                        let orow = &mut plane[i * wo..(i + 1) * wo];
                        for (j, o_ij) in orow.iter_mut().enumerate() {
                            *o_ij += wv * row[j * stride];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c_out, ho, wo], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the input gradient is
/// skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (c_in, h, w, c_out, kh, kw, ho, wo) = conv_geometry(x, weight, stride, padding)?;
    if grad_out.shape() != [c_out, ho, wo] {
        return Err(NnError::ShapeMismatch(format!(
            "conv grad {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, ho, wo]
        )));
    }
    let (xp, hp, wp) = pad_input(x, padding);
    let wd = weight.data();
    let g = grad_out.data();
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); c_out];
    let mut gxp = if need_input { vec![T::zero(); xp.len()] } else { Vec::new() };
    for o in 0..c_out {
        let go = &g[o * ho * wo..(o + 1) * ho * wo];
        gb[o] = go.iter().copied().sum();
        for c in 0..c_in {
            let base = c * hp * wp;
            for u in 0..kh {
                for v in 0..kw {
                    let widx = ((o * c_in + c) * kh + u) * kw + v;
                    let wv = wd[widx];
                    let mut acc = T::zero();
                    for i in 0..ho {
                        let off = base + (i * stride + u) * wp + v;
                        let grow = &go[i * wo..(i + 1) * wo];
                        for (j, &gij) in grow.iter().enumerate() {
                            acc += gij * xp[off + j * stride];
                        }
                        if need_input {
                            for (j, &gij) in grow.iter().enumerate() {
                                gxp[off + j * stride] += wv * gij;
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    let gx = if need_input {
        let mut gx = vec![T::zero(); c_in * h * w];
        for c in 0..c_in {
            for i in 0..h {
                let src = (c * hp + i + padding) * wp + padding;
                gx[(c * h + i) * w..(c * h + i + 1) * w].copy_from_slice(&gxp[src..src + w]);
            }
        }
        Some(Tensor::from_vec(x.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((
        gx,
        Tensor::from_vec(weight.shape().to_vec(), gw)?,
        Tensor::from_vec(vec![c_out], gb)?,
    ))
}

/// Window maximum per channel. Also returns, for every output element, the
/// flat input index of its maximum (first in row-major window order on ties).
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = chw(x, "maxpool")?;
    let ho = window_out(h, window, stride, 0)
        .ok_or_else(|| NnError::ShapeMismatch(format!("pool window {window} does not fit height {h}")))?;
    let wo = window_out(w, window, stride, 0)
        .ok_or_else(|| NnError::ShapeMismatch(format!("pool window {window} does not fit width {w}")))?;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best_idx = (ch * h + i * stride) * w + j * stride;
                let mut best = xd[best_idx];
                for u in 0..window {
                    for v in 0..window {
                        let idx = (ch * h + i * stride + u) * w + j * stride + v;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(vec![c, ho, wo], out)?, argmax))
}

pub fn maxpool_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(NnError::ShapeMismatch("argmax / gradient length differ".into()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(NnError::ShapeMismatch("relu gradient shape".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize)> {
    let (out, inp) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(NnError::ShapeMismatch(format!("dense weight must be rank 2, got {s:?}"))),
    };
    if x.len() != inp {
        return Err(NnError::ShapeMismatch(format!(
            "dense expects {inp} inputs, got {} ({:?})",
            x.len(),
            x.shape()
        )));
    }
    Ok((out, inp))
}

/// `y = W · flatten(x) + b`
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, inp) = dense_dims(x, weight)?;
    if bias.shape() != [out] {
        return Err(NnError::ShapeMismatch(format!("dense bias {:?} for {out} outputs", bias.shape())));
    }
    let xd = x.data();
    let y = (0..out)
        .map(|o| {
            let row = &weight.data()[o * inp..(o + 1) * inp];
            let mut acc = bias.data()[o];
            for (&w, &v) in row.iter().zip(xd) {
                acc += w * v;
            }
            acc
        })
        .collect();
    Tensor::from_vec(vec![out], y)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (out, inp) = dense_dims(x, weight)?;
    if grad_out.shape() != [out] {
        return Err(NnError::ShapeMismatch(format!("dense grad {:?} for {out} outputs", grad_out.shape())));
    }
    let xd = x.data();
    let g = grad_out.data();
    let mut gw = vec![T::zero(); out * inp];
    for o in 0..out {
        for (gwi, &v) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xd) {
            *gwi = g[o] * v;
        }
    }
    let gx = if need_input {
        let mut gx = vec![T::zero(); inp];
        for o in 0..out {
            let row = &weight.data()[o * inp..(o + 1) * inp];
            for (gxi, &w) in gx.iter_mut().zip(row) {
                *gxi += g[o] * w;
            }
        }
        Some(Tensor::from_vec(x.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((
        gx,
        Tensor::from_vec(vec![out, inp], gw)?,
        Tensor::from_vec(vec![out], g.to_vec())?,
    ))
}

pub fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "global average pool")?;
    let n = T::of((h * w) as f64);
    let means = x.data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
    debug_assert_eq!(c, x.len() / (h * w));
    Tensor::from_vec(vec![c], means)
}

pub fn gap_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        ref s => return Err(NnError::ShapeMismatch(format!("gap input shape {s:?}"))),
    };
    if grad_out.shape() != [c] {
        return Err(NnError::ShapeMismatch("gap gradient shape".into()));
    }
    let inv = T::one() / T::of((h * w) as f64);
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}

/// Max-shifted softmax over a rank-1 tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 1 {
        return Err(NnError::ShapeMismatch(format!("softmax expects rank 1, got {:?}", logits.shape())));
    }
    logits.ensure_finite("softmax logits")?;
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor::from_vec(logits.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
}

/// `-ln(p[label] + 1e-12)`
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(NnError::BadLabel {
            label,
            classes: probs.len(),
        });
    }
    Ok(-(probs.data()[label].as_f64() + CE_FLOOR).ln())
}
