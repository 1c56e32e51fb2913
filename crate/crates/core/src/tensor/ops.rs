//! Forward operators with their backward rules.
//!
//! Every function records its output on the tape and returns the new
//! [`Var`]. Spatial operators take NCHW tensors.

use std::sync::Arc;

use super::{Element, GradCtx, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn t<T: Element>(v: f64) -> T {
    T::of_f64(v)
}

fn same_shape<T: Element>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(format!(
            "{op}: shapes {sa:?} and {sb:?} differ"
        )));
    }
    Ok(())
}

pub fn add<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "add")?;
    let (va, vb) = (tape.value(a), tape.value(b));
    let data = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::new(va.shape().to_vec(), data)?;
    Ok(tape.record(
        out,
        &[a, b],
        Box::new(|ctx| {
            let g = ctx.grad_output;
            ctx.needs_grad
                .iter()
                .map(|&n| n.then(|| g.to_vec()))
                .collect()
        }),
    ))
}

/// Elementwise product.
pub fn mul<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mul")?;
    let (va, vb) = (tape.value(a), tape.value(b));
    let data = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::new(va.shape().to_vec(), data)?;
    Ok(tape.record(
        out,
        &[a, b],
        Box::new(|ctx| {
            let g = ctx.grad_output;
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs_grad[0].then(|| g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                ctx.needs_grad[1].then(|| g.iter().zip(x).map(|(&g, &x)| g * x).collect()),
            ]
        }),
    ))
}

pub fn scale<T: Element>(tape: &mut Tape<T>, x: Var, factor: T) -> Var {
    let v = tape.value(x);
    let out = Tensor::new(
        v.shape().to_vec(),
        v.data().iter().map(|&e| e * factor).collect(),
    )
    .expect("same shape");
    tape.record(
        out,
        &[x],
        Box::new(move |ctx| vec![Some(ctx.grad_output.iter().map(|&g| g * factor).collect())]),
    )
}

/// Sum of all elements as a one-element tensor.
pub fn sum<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.value(x).sum();
    tape.record(
        Tensor::scalar(s),
        &[x],
        Box::new(|ctx| vec![Some(vec![ctx.grad_output[0]; ctx.inputs[0].numel()])]),
    )
}

pub fn mean<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let n = tape.value(x).numel();
    let s = sum(tape, x);
    scale(tape, s, t::<T>(1.0 / n as f64))
}

pub fn leaky_relu<T: Element>(tape: &mut Tape<T>, x: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "leaky_relu slope must lie in (0, 1), got {alpha}"
        )));
    }
    let a = t::<T>(alpha);
    let v = tape.value(x);
    let data = v
        .data()
        .iter()
        .map(|&e| if e >= T::zero() { e } else { a * e })
        .collect();
    let out = Tensor::new(v.shape().to_vec(), data)?;
    Ok(tape.record(
        out,
        &[x],
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                ctx.grad_output
                    .iter()
                    .zip(x)
                    .map(|(&g, &e)| if e >= T::zero() { g } else { a * g })
                    .collect(),
            )]
        }),
    ))
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let v = tape.value(x);
    let out = Tensor::new(
        v.shape().to_vec(),
        v.data().iter().map(|&e| stable_sigmoid(e)).collect(),
    )
    .expect("same shape");
    tape.record(
        out,
        &[x],
        Box::new(|ctx| {
            let y = ctx.output.data();
            vec![Some(
                ctx.grad_output
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            )]
        }),
    )
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output spatial extent of a convolution, or an error for a kernel that does
/// not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    if size + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "conv2d kernel {kernel} does not fit input extent {size} with padding {pad}"
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.stride, g.pad);
    let ohw = g.ohw();
    for c in 0..g.c {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // valid ox satisfy 0 <= ox + kj - p < w
                        let lo = p.saturating_sub(kj).min(g.ow);
                        let hi = (w + p).saturating_sub(kj).min(g.ow).max(lo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let start = lo + kj - p;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.stride, g.pad);
    let ohw = g.ohw();
    for c in 0..g.c {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let srcrow = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &srcrow[oy * g.ow..(oy + 1) * g.ow];
                    if s == 1 {
                        let lo = p.saturating_sub(kj).min(g.ow);
                        let hi = (w + p).saturating_sub(kj).min(g.ow).max(lo);
                        let start = lo + kj - p;
                        dst[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&src[lo..hi])
                            .for_each(|(d, &v)| *d = *d + v);
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) of an NCHW input with an OIKK
/// weight.
pub fn conv2d<T: Element>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(input).dims4()?;
    let (o, i, kh, kw) = tape.value(weight).dims4().map_err(|_| {
        Error::shape(format!(
            "conv2d weight must be O×I×K×K, got {:?}",
            tape.value(weight).shape()
        ))
    })?;
    if kh != kw {
        return Err(Error::shape(format!(
            "conv2d kernel must be square, got {kh}×{kw}"
        )));
    }
    if i != c {
        return Err(Error::shape(format!(
            "conv2d input has {c} channels but weight expects {i}"
        )));
    }
    if let Some(b) = bias {
        if tape.value(b).shape() != [o] {
            return Err(Error::shape(format!(
                "conv2d bias must have shape [{o}], got {:?}",
                tape.value(b).shape()
            )));
        }
    }
    let oh = conv_output_size(h, kh, stride, padding)?;
    let ow = conv_output_size(w, kw, stride, padding)?;
    let g = ConvGeom {
        n,
        c,
        h,
        w,
        o,
        k: kh,
        stride,
        pad: padding,
        oh,
        ow,
    };

    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut out = vec![T::zero(); n * o * ohw];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    for b in 0..n {
        let xb = &x[b * c * h * w..(b + 1) * c * h * w];
        let cols: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let ob = &mut out[b * o * ohw..(b + 1) * o * ohw];
        T::gemm(
            o,
            ckk,
            ohw,
            T::one(),
            wt,
            ckk as isize,
            1,
            cols,
            ohw as isize,
            1,
            T::zero(),
            ob,
            ohw as isize,
            1,
        );
        if let Some(bv) = bias {
            let bd = tape.value(bv).data();
            for (oc, chunk) in ob.chunks_mut(ohw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + bd[oc]);
            }
        }
    }
    let out = Tensor::new(vec![n, o, oh, ow], out)?;
    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    Ok(tape.record(out, &inputs, Box::new(move |ctx| conv2d_backward(ctx, &g))))
}

fn conv2d_backward<T: Element>(ctx: &GradCtx<'_, T>, g: &ConvGeom) -> Vec<Option<Vec<T>>> {
    let x = ctx.inputs[0].data();
    let wt = ctx.inputs[1].data();
    let dy = ctx.grad_output;
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let chw = g.c * g.h * g.w;

    let mut dx = ctx.needs_grad[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = ctx.needs_grad[1].then(|| vec![T::zero(); wt.len()]);
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { ckk * ohw }];
    let mut dcol = vec![
        T::zero();
        if g.pointwise() || dx.is_none() {
            0
        } else {
            ckk * ohw
        }
    ];

    for b in 0..g.n {
        let dyb = &dy[b * g.o * ohw..(b + 1) * g.o * ohw];
        let xb = &x[b * chw..(b + 1) * chw];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dW[O, CKK] += dY[O, OHW] · colᵀ
            T::gemm(
                g.o,
                ohw,
                ckk,
                T::one(),
                dyb,
                ohw as isize,
                1,
                cols,
                1,
                ohw as isize,
                T::one(),
                dw,
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * chw..(b + 1) * chw];
            // dcol[CKK, OHW] = Wᵀ · dY
            if g.pointwise() {
                T::gemm(
                    ckk,
                    g.o,
                    ohw,
                    T::one(),
                    wt,
                    1,
                    ckk as isize,
                    dyb,
                    ohw as isize,
                    1,
                    T::zero(),
                    dxb,
                    ohw as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    g.o,
                    ohw,
                    T::one(),
                    wt,
                    1,
                    ckk as isize,
                    dyb,
                    ohw as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    ohw as isize,
                    1,
                );
                col2im(&dcol, g, dxb);
            }
        }
    }

    let mut grads = vec![dx, dw];
    if ctx.inputs.len() == 3 {
        grads.push(ctx.needs_grad[2].then(|| {
            let mut db = vec![T::zero(); g.o];
            for b in 0..g.n {
                for (oc, d) in db.iter_mut().enumerate() {
                    let start = (b * g.o + oc) * ohw;
                    *d = dy[start..start + ohw].iter().fold(*d, |a, &v| a + v);
                }
            }
            db
        }));
    }
    grads
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Element> {
    pub mean: Vec<T>,
    /// Unbiased variance (divisor M-1), the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

/// Exponential moving averages of batch statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = t::<T>(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

/// Which statistics batch norm normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T: Element> {
    /// Current batch statistics over N, H, W per channel.
    Batch,
    /// Stored running estimates.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch normalization over an NCHW tensor.
///
/// Returns the batch statistics alongside the output when normalizing with
/// [`NormStats::Batch`] so the caller can update running estimates.
pub fn batch_norm2d<T: Element>(
    tape: &mut Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    stats: NormStats<'_, T>,
) -> Result<(Var, Option<BatchStats<T>>)> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!(
            "batch_norm2d eps must be positive, got {eps}"
        )));
    }
    let (n, c, h, w) = tape.value(input).dims4()?;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.value(v).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm2d {name} must have shape [{c}], got {:?}",
                tape.value(v).shape()
            )));
        }
    }
    let hw = h * w;
    let m = n * hw;
    let x = tape.value(input).data();
    let gm = tape.value(gamma).data().to_vec();
    let bt = tape.value(beta).data();
    let eps_t = t::<T>(eps);

    let (mean, var, batch_stats) = match stats {
        NormStats::Batch => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let st = (b * c + ch) * hw;
                    s += x[st..st + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for b in 0..n {
                    let st = (b * c + ch) * hw;
                    ss += x[st..st + hw]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = t(mu);
                var[ch] = t(ss / m as f64);
            }
            let unbiased = if m > 1 {
                var.iter()
                    .map(|&v| v * t::<T>(m as f64 / (m - 1) as f64))
                    .collect()
            } else {
                var.clone()
            };
            let bs = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(bs))
        }
        NormStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(format!(
                    "batch_norm2d running stats must have {c} channels"
                )));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let st = (b * c + ch) * hw;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gm[ch], bt[ch]);
            for j in st..st + hw {
                let xh = (x[j] - mu) * is;
                xhat[j] = xh;
                out[j] = g * xh + be;
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    let training = batch_stats.is_some();
    let var_out = tape.record(
        out,
        &[input, gamma, beta],
        Box::new(move |ctx| {
            let dy = ctx.grad_output;
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let st = (b * c + ch) * hw;
                    for j in st..st + hw {
                        dbeta[ch] = dbeta[ch] + dy[j];
                        dgamma[ch] = dgamma[ch] + dy[j] * xhat[j];
                    }
                }
            }
            let dx = ctx.needs_grad[0].then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                let mf = t::<T>(m as f64);
                for ch in 0..c {
                    let k = gm[ch] * inv_std[ch];
                    let (sdy, sdyx) = (dbeta[ch], dgamma[ch]);
                    for b in 0..n {
                        let st = (b * c + ch) * hw;
                        for j in st..st + hw {
                            dx[j] = if training {
                                k * (mf * dy[j] - sdy - xhat[j] * sdyx) / mf
                            } else {
                                k * dy[j]
                            };
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                ctx.needs_grad[1].then_some(dgamma),
                ctx.needs_grad[2].then_some(dbeta),
            ]
        }),
    );
    Ok((var_out, batch_stats))
}

/// Concatenates NCHW tensors along the channel axis, preserving input order.
pub fn concat_channels<T: Element>(tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
    let (n, _, h, w) = tape.value(first).dims4()?;
    let mut channels = Vec::with_capacity(inputs.len());
    for &v in inputs {
        let (vn, vc, vh, vw) = tape.value(v).dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: input {:?} does not match N={n}, H={h}, W={w}",
                tape.value(v).shape()
            )));
        }
        channels.push(vc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (&v, &c) in inputs.iter().zip(&channels) {
            let d = tape.value(v).data();
            out.extend_from_slice(&d[b * c * hw..(b + 1) * c * hw]);
        }
    }
    let out = Tensor::new(vec![n, total, h, w], out)?;
    Ok(tape.record(
        out,
        inputs,
        Box::new(move |ctx| {
            let dy = ctx.grad_output;
            let mut offset = 0;
            let mut grads = Vec::with_capacity(channels.len());
            for (i, &c) in channels.iter().enumerate() {
                grads.push(ctx.needs_grad[i].then(|| {
                    let mut g = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let st = (b * total + offset) * hw;
                        g.extend_from_slice(&dy[st..st + c * hw]);
                    }
                    g
                }));
                offset += c;
            }
            grads
        }),
    ))
}

/// Splits an NCHW tensor along channels into consecutive groups.
pub fn split_channels<T: Element>(tape: &mut Tape<T>, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if sizes.iter().sum::<usize>() != c || sizes.iter().any(|&s| s == 0) {
        return Err(Error::shape(format!(
            "split_channels: sizes {sizes:?} do not partition {c} channels"
        )));
    }
    let hw = h * w;
    let mut outs = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in sizes {
        let d = tape.value(x).data();
        let mut part = Vec::with_capacity(n * size * hw);
        for b in 0..n {
            let st = (b * c + offset) * hw;
            part.extend_from_slice(&d[st..st + size * hw]);
        }
        let out = Tensor::new(vec![n, size, h, w], part)?;
        let off = offset;
        outs.push(tape.record(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    let st = (b * c + off) * hw;
                    g[st..st + size * hw]
                        .copy_from_slice(&ctx.grad_output[b * size * hw..(b + 1) * size * hw]);
                }
                vec![Some(g)]
            }),
        ));
        offset += size;
    }
    Ok(outs)
}

/// Nearest-neighbour 2× upsampling: each value fills a 2×2 block.
pub fn upsample_nearest2x<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let d = tape.value(x).data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for i in 0..oh {
            let src = &d[p * h * w + (i / 2) * w..p * h * w + (i / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + i * ow..p * oh * ow + (i + 1) * ow];
            for (j, o) in dst.iter_mut().enumerate() {
                *o = src[j / 2];
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    Ok(tape.record(
        out,
        &[x],
        Box::new(move |ctx| {
            let dy = ctx.grad_output;
            let mut g = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        let k = p * h * w + (i / 2) * w + j / 2;
                        g[k] = g[k] + dy[p * oh * ow + i * ow + j];
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Pixel-slicing rearrangement used by the focus stem.
///
/// Output channel `s·C + c` holds slice `s` of input channel `c`, where the
/// slices are the (row, column) parity grids (even, even), (even, odd),
/// (odd, even), (odd, odd).
pub fn space_to_depth<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "pixel slicing needs even height and width, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = tape.value(x).data();
    let mut out = vec![T::zero(); n * 4 * c * oh * ow];
    let index = move |b: usize, s: usize, ch: usize, i: usize, j: usize| {
        let (dy, dx) = (s / 2, s % 2);
        let src = ((b * c + ch) * h + 2 * i + dy) * w + 2 * j + dx;
        let dst = ((b * 4 * c + s * c + ch) * oh + i) * ow + j;
        (src, dst)
    };
    for b in 0..n {
        for s in 0..4 {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let (src, dst) = index(b, s, ch, i, j);
                        out[dst] = d[src];
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![n, 4 * c, oh, ow], out)?;
    Ok(tape.record(
        out,
        &[x],
        Box::new(move |ctx| {
            let mut g = vec![T::zero(); n * c * h * w];
            for b in 0..n {
                for s in 0..4 {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let (src, dst) = index(b, s, ch, i, j);
                                g[src] = ctx.grad_output[dst];
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Picks elements by flat index into a 1-D tensor; repeated indices
/// accumulate in backward.
pub fn gather<T: Element>(tape: &mut Tape<T>, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
    let d = tape.value(x).data();
    if indices.is_empty() {
        return Err(Error::invalid("gather needs at least one index"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
        return Err(Error::shape(format!(
            "gather index {bad} out of range for {} elements",
            d.len()
        )));
    }
    let out = Tensor::new(vec![indices.len()], indices.iter().map(|&i| d[i]).collect())?;
    Ok(tape.record(
        out,
        &[x],
        Box::new(move |ctx| {
            let mut g = vec![T::zero(); ctx.inputs[0].numel()];
            for (&i, &v) in indices.iter().zip(ctx.grad_output) {
                g[i] = g[i] + v;
            }
            vec![Some(g)]
        }),
    ))
}

/// Flattens and joins tensors end to end into one 1-D tensor.
pub fn concat_flat<T: Element>(tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat_flat needs at least one input"));
    }
    let lens: Vec<usize> = inputs.iter().map(|&v| tape.value(v).numel()).collect();
    let mut out = Vec::with_capacity(lens.iter().sum());
    for &v in inputs {
        out.extend_from_slice(tape.value(v).data());
    }
    let total = out.len();
    let out = Tensor::new(vec![total], out)?;
    Ok(tape.record(
        out,
        inputs,
        Box::new(move |ctx| {
            let mut offset = 0;
            lens.iter()
                .enumerate()
                .map(|(i, &len)| {
                    let g =
                        ctx.needs_grad[i].then(|| ctx.grad_output[offset..offset + len].to_vec());
                    offset += len;
                    g
                })
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f32>, shape: &[usize], data: Vec<f32>) -> Var {
        tape.leaf(
            Tensor::new(shape.to_vec(), data)
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn conv_of_ones_is_dot_product() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let w = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&mut tape, x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 5)
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let x = leaf(&mut tape, &[2, 3, 4, 5], data.clone());
        let mut wd = vec![0.0; 9];
        for c in 0..3 {
            wd[c * 3 + c] = 1.0;
        }
        let w = leaf(&mut tape, &[3, 3, 1, 1], wd);
        let b = leaf(&mut tape, &[3], vec![0.0; 3]);
        let y = conv2d(&mut tape, x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        let r = tape.constant(
            Tensor::new(vec![2, 3, 4, 5], data.iter().map(|v| v * 2.0).collect()).unwrap(),
        );
        let l = mul(&mut tape, y, r).unwrap();
        let l = sum(&mut tape, l);
        tape.backward(l).unwrap();
        let expect: Vec<f32> = data.iter().map(|v| v * 2.0).collect();
        assert_eq!(tape.grad(x).unwrap(), &expect[..]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 4, 4], vec![0.0; 32]);
        let w = leaf(&mut tape, &[1, 3, 3, 3], vec![0.0; 27]);
        assert!(matches!(
            conv2d(&mut tape, x, w, None, 1, 1),
            Err(Error::Shape(_))
        ));
        let w = leaf(&mut tape, &[1, 2, 5, 5], vec![0.0; 50]);
        assert!(conv2d(&mut tape, x, w, None, 1, 0).is_err());
        assert!(conv2d(&mut tape, x, w, None, 1, 1).is_ok());
        assert!(conv2d(&mut tape, x, w, None, 0, 1).is_err());
    }

    #[test]
    fn focus_conv_shape_at_414() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 12, 207, 207]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![32, 12, 3, 3]).unwrap());
        let y = conv2d(&mut tape, x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 32, 207, 207]);
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 2, 2], vec![3.5; 8]);
        let g = leaf(&mut tape, &[1], vec![1.0]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let (y, stats) = batch_norm2d(&mut tape, x, g, b, 1e-5, NormStats::Batch).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![3.5]);
    }

    #[test]
    fn batch_norm_unit_values_pass_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]);
        let g = leaf(&mut tape, &[1], vec![1.0]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let (y, _) = batch_norm2d(&mut tape, x, g, b, 1e-12, NormStats::Batch).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_reconstructs_input_from_its_own_stats() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 2, 3], data.clone()).unwrap());
        let mut mean = [0.0; 2];
        let mut var = [0.0; 2];
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| data[(b * 2 + ch) * 6..(b * 2 + ch) * 6 + 6].to_vec())
                .collect();
            mean[ch] = vals.iter().sum::<f64>() / 12.0;
            var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / 12.0;
        }
        let g = tape.leaf(Tensor::new(vec![2], var.iter().map(|v| v.sqrt()).collect()).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], mean.to_vec()).unwrap());
        let (y, _) = batch_norm2d(&mut tape, x, g, b, 1e-9, NormStats::Batch).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&data) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn batch_norm_rejects_bad_eps_and_channels() {
        let mut tape = Tape::<f32>::new();
        let x = leaf(&mut tape, &[1, 2, 1, 1], vec![0.0; 2]);
        let g = leaf(&mut tape, &[1], vec![1.0]);
        let b = leaf(&mut tape, &[2], vec![0.0; 2]);
        assert!(batch_norm2d(&mut tape, x, g, b, 1e-5, NormStats::Batch).is_err());
        let g = leaf(&mut tape, &[2], vec![1.0; 2]);
        assert!(batch_norm2d(&mut tape, x, g, b, 0.0, NormStats::Batch).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![5.0, -2.0, 0.0]);
        let y = leaky_relu(&mut tape, x, 0.1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -0.2, 0.0]);
        assert!(leaky_relu(&mut tape, x, 1.0).is_err());
        assert!(leaky_relu(&mut tape, x, 0.0).is_err());
    }

    #[test]
    fn sigmoid_values_and_stability() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[5], vec![0.0, 100.0, -100.0, 3.0, -3.0]);
        let y = sigmoid(&mut tape, x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] as f64 > 1.0 - 1e-9 && v[1] <= 1.0 && v[1].is_finite());
        assert!(v[2].is_finite() && v[2] >= 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-6);
        let s = sum(&mut tape, y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], 0.25);
    }

    #[test]
    fn concat_shapes_and_order() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 2, 4, 4], vec![1.0; 32]);
        let b = leaf(&mut tape, &[1, 3, 4, 4], vec![2.0; 48]);
        let y = concat_channels(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 4, 4]);
        assert_eq!(tape.value(y).data()[31], 1.0);
        assert_eq!(tape.value(y).data()[32], 2.0);
        let single = concat_channels(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(single).data(), tape.value(a).data());
        let c = leaf(&mut tape, &[1, 1, 2, 4], vec![0.0; 8]);
        assert!(concat_channels(&mut tape, &[a, c]).is_err());
    }

    #[test]
    fn focus_concat_shape_at_414() {
        let mut tape = Tape::<f32>::new();
        let parts: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::zeros(vec![1, 3, 207, 207]).unwrap()))
            .collect();
        let y = concat_channels(&mut tape, &parts).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 12, 207, 207]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 1, 1], vec![7.0]);
        let y = upsample_nearest2x(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0; 4]);
        let x = leaf(&mut tape, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest2x(&mut tape, x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(tape.value(y).sum(), 4.0 * tape.value(x).sum());
        let s = sum(&mut tape, y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn gather_accumulates_repeated_indices() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = gather(&mut tape, x, Arc::new(vec![3, 1, 3])).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 2.0, 4.0]);
        let s = sum(&mut tape, y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 2.0]);
        assert!(gather(&mut tape, x, Arc::new(vec![4])).is_err());
    }

    #[test]
    fn space_to_depth_rejects_odd_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]).unwrap());
        assert!(space_to_depth(&mut tape, x).is_err());
    }
}
