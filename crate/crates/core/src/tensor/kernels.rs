//! Forward and backward kernels on raw tensors.
//!
//! Convolutions use zero same-padding and stride 1 throughout. The dense
//! products go through `matrixmultiply::dgemm`, which is single-threaded and
//! therefore bitwise reproducible.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(format!(
            "{what}: expected 4-d tensor, got {s:?}"
        ))),
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn conv_geom(x: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<ConvGeom> {
    let [batch, cin, h, w] = dims4(x, "conv2d input")?;
    let [cout, kcin, kh, kw] = dims4(k, "conv2d kernel")?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} must be odd"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                b.shape()
            )));
        }
    }
    Ok(ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
    })
}

/// Valid output columns `[lo, hi)` for kernel offset `d` with padding `p`.
fn valid_range(d: usize, p: usize, len: usize) -> (usize, usize) {
    let lo = p.saturating_sub(d);
    let hi = (len + p).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

/// Unfold the batch `[b, cin, h, w]` into `cols` shaped `[cin·kh·kw, b·h·w]`.
/// Padding positions are never written, so `cols` must arrive zeroed.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let ld = g.batch * hw;
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for b in 0..g.batch {
        for ci in 0..g.cin {
            let src = &x[(b * g.cin + ci) * hw..(b * g.cin + ci + 1) * hw];
            for di in 0..g.kh {
                let (ilo, ihi) = valid_range(di, ph, h);
                for dj in 0..g.kw {
                    let (jlo, jhi) = valid_range(dj, pw, w);
                    let row = (ci * g.kh + di) * g.kw + dj;
                    let dst = &mut cols[row * ld + b * hw..row * ld + (b + 1) * hw];
                    for i in ilo..ihi {
                        let si = i + di - ph;
                        let (s0, d0) = (si * w + jlo + dj - pw, i * w + jlo);
                        dst[d0..d0 + jhi - jlo].copy_from_slice(&src[s0..s0 + jhi - jlo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns into the batch.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let ld = g.batch * hw;
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for b in 0..g.batch {
        for ci in 0..g.cin {
            let dst = &mut x[(b * g.cin + ci) * hw..(b * g.cin + ci + 1) * hw];
            for di in 0..g.kh {
                let (ilo, ihi) = valid_range(di, ph, h);
                for dj in 0..g.kw {
                    let (jlo, jhi) = valid_range(dj, pw, w);
                    let row = (ci * g.kh + di) * g.kw + dj;
                    let src = &cols[row * ld + b * hw..row * ld + (b + 1) * hw];
                    for i in ilo..ihi {
                        let si = i + di - ph;
                        let (d0, s0) = (si * w + jlo + dj - pw, i * w + jlo);
                        for (d, s) in dst[d0..d0 + jhi - jlo]
                            .iter_mut()
                            .zip(&src[s0..s0 + jhi - jlo])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `[b, c, hw]` to channel-major `[c, b·hw]` and back.
fn to_channel_major(x: &[f64], batch: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for ci in 0..c {
            out[ci * batch * hw + b * hw..ci * batch * hw + (b + 1) * hw]
                .copy_from_slice(&x[(b * c + ci) * hw..(b * c + ci + 1) * hw]);
        }
    }
    out
}

fn from_channel_major(m: &[f64], batch: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for b in 0..batch {
        for ci in 0..c {
            out[(b * c + ci) * hw..(b * c + ci + 1) * hw]
                .copy_from_slice(&m[ci * batch * hw + b * hw..ci * batch * hw + (b + 1) * hw]);
        }
    }
    out
}

pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = conv_geom(x, k, bias)?;
    let hw = g.h * g.w;
    let n = g.batch * hw;
    let ckk = g.ckk();
    let mut cols = vec![0.0; ckk * n];
    im2col(x.data(), &g, &mut cols);
    let mut y = vec![0.0; g.cout * n];
    gemm(
        g.cout,
        ckk,
        n,
        k.data(),
        (ckk, 1),
        &cols,
        (n, 1),
        0.0,
        &mut y,
        (n, 1),
    );
    if let Some(bias) = bias {
        for (co, &b0) in bias.data().iter().enumerate() {
            y[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += b0);
        }
    }
    Tensor::new(
        &[g.batch, g.cout, g.h, g.w],
        from_channel_major(&y, g.batch, g.cout, hw),
    )
}

pub struct Conv2dGrads {
    pub dx: Option<Tensor>,
    pub dk: Option<Tensor>,
    pub dbias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    need: (bool, bool, bool),
) -> Result<Conv2dGrads> {
    let g = conv_geom(x, k, None)?;
    let hw = g.h * g.w;
    let n = g.batch * hw;
    let ckk = g.ckk();
    if dy.shape() != [g.batch, g.cout, g.h, g.w] {
        return Err(Error::shape(format!(
            "conv2d backward: dy shape {:?}",
            dy.shape()
        )));
    }
    let dym = to_channel_major(dy.data(), g.batch, g.cout, hw);
    let mut cols = vec![0.0; ckk * n];
    let dk = need.1.then(|| {
        im2col(x.data(), &g, &mut cols);
        let mut dk = vec![0.0; g.cout * ckk];
        gemm(
            g.cout,
            n,
            ckk,
            &dym,
            (n, 1),
            &cols,
            (1, n),
            0.0,
            &mut dk,
            (ckk, 1),
        );
        dk
    });
    let dx = need.0.then(|| {
        gemm(
            ckk,
            g.cout,
            n,
            k.data(),
            (1, ckk),
            &dym,
            (n, 1),
            0.0,
            &mut cols,
            (n, 1),
        );
        let mut dx = vec![0.0; x.numel()];
        col2im(&cols, &g, &mut dx);
        dx
    });
    let dbias = if need.2 {
        let db = (0..g.cout)
            .map(|co| {
                (0..g.batch)
                    .map(|b| {
                        dy.data()[(b * g.cout + co) * hw..(b * g.cout + co + 1) * hw]
                            .iter()
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        Some(Tensor::new(&[g.cout], db)?)
    } else {
        None
    };
    Ok(Conv2dGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dk: dk.map(|d| Tensor::new(k.shape(), d)).transpose()?,
        dbias,
    })
}

fn depthwise_geom(x: &Tensor, k: &Tensor) -> Result<ConvGeom> {
    let [batch, c, h, w] = dims4(x, "depthwise input")?;
    let [kc, one, kh, kw] = dims4(k, "depthwise kernel")?;
    if kc != c || one != 1 {
        return Err(Error::shape(format!(
            "depthwise: input has {c} channels, kernel shape {:?}",
            k.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!(
            "depthwise: kernel {kh}x{kw} must be odd"
        )));
    }
    Ok(ConvGeom {
        batch,
        cin: c,
        h,
        w,
        cout: c,
        kh,
        kw,
    })
}

/// Per-channel spatial convolution, kernel `[C,1,kh,kw]`, no bias.
pub fn depthwise_conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let g = depthwise_geom(x, k)?;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.h * g.w;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut out = vec![0.0; x.numel()];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let src = &x.data()[(b * g.cin + c) * hw..(b * g.cin + c + 1) * hw];
            let ker = &k.data()[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(b * g.cin + c) * hw..(b * g.cin + c + 1) * hw];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..g.kh as isize {
                        let si = i + di - ph;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for dj in 0..g.kw as isize {
                            let sj = j + dj - pw;
                            if sj >= 0 && sj < w {
                                acc += ker[(di * g.kw as isize + dj) as usize]
                                    * src[(si * w + sj) as usize];
                            }
                        }
                    }
                    dst[(i * w + j) as usize] = acc;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn depthwise_conv2d_backward(x: &Tensor, k: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = depthwise_geom(x, k)?;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.h * g.w;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; k.numel()];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * hw;
            let src = &x.data()[base..base + hw];
            let gy = &dy.data()[base..base + hw];
            let kbase = c * g.kh * g.kw;
            for i in 0..h {
                for j in 0..w {
                    let go = gy[(i * w + j) as usize];
                    if go == 0.0 {
                        continue;
                    }
                    for di in 0..g.kh as isize {
                        let si = i + di - ph;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for dj in 0..g.kw as isize {
                            let sj = j + dj - pw;
                            if sj >= 0 && sj < w {
                                let kidx = kbase + (di * g.kw as isize + dj) as usize;
                                let sidx = (si * w + sj) as usize;
                                dk[kidx] += go * src[sidx];
                                dx[base + sidx] += go * k.data()[kidx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(k.shape(), dk)?))
}

fn bmm_dims(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    let (g, m, k) = match *a.shape() {
        [m, k] => (1, m, k),
        [g, m, k] => (g, m, k),
        ref s => {
            return Err(Error::shape(format!(
                "matmul: lhs must be 2-d or 3-d, got {s:?}"
            )))
        }
    };
    let (gb, r, c) = match *b.shape() {
        [r, c] => (1, r, c),
        [gb, r, c] => (gb, r, c),
        ref s => {
            return Err(Error::shape(format!(
                "matmul: rhs must be 2-d or 3-d, got {s:?}"
            )))
        }
    };
    let (kb, n) = if trans_b { (c, r) } else { (r, c) };
    if gb != g || kb != k || a.ndim() != b.ndim() {
        return Err(Error::shape(format!(
            "matmul: incompatible {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if trans_b { "ᵀ" } else { "" }
        )));
    }
    Ok((g, m, k, n))
}

/// Batched product `a·b` (or `a·bᵀ` when `trans_b`) over a leading group axis.
/// Two-dimensional operands are treated as a single group.
pub fn matmul(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (g, m, k, n) = bmm_dims(a, b, trans_b)?;
    let mut out = vec![0.0; g * m * n];
    let bstr = if trans_b { (1, k) } else { (n, 1) };
    for gi in 0..g {
        gemm(
            m,
            k,
            n,
            &a.data()[gi * m * k..(gi + 1) * m * k],
            (k, 1),
            &b.data()[gi * k * n..(gi + 1) * k * n],
            bstr,
            0.0,
            &mut out[gi * m * n..(gi + 1) * m * n],
            (n, 1),
        );
    }
    let shape = if a.ndim() == 2 {
        vec![m, n]
    } else {
        vec![g, m, n]
    };
    Tensor::new(&shape, out)
}

pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    trans_b: bool,
    dy: &Tensor,
    need: (bool, bool),
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (g, m, k, n) = bmm_dims(a, b, trans_b)?;
    let da = need.0.then(|| {
        let mut da = vec![0.0; g * m * k];
        // da = dy · bᵀ  (or dy · b when b is already transposed)
        let bstr = if trans_b { (k, 1) } else { (1, n) };
        for gi in 0..g {
            gemm(
                m,
                n,
                k,
                &dy.data()[gi * m * n..(gi + 1) * m * n],
                (n, 1),
                &b.data()[gi * k * n..(gi + 1) * k * n],
                bstr,
                0.0,
                &mut da[gi * m * k..(gi + 1) * m * k],
                (k, 1),
            );
        }
        da
    });
    let db = need.1.then(|| {
        let mut db = vec![0.0; g * k * n];
        for gi in 0..g {
            let av = &a.data()[gi * m * k..(gi + 1) * m * k];
            let gv = &dy.data()[gi * m * n..(gi + 1) * m * n];
            let out = &mut db[gi * k * n..(gi + 1) * k * n];
            if trans_b {
                // db[n×k] = dyᵀ · a
                gemm(n, m, k, gv, (1, n), av, (k, 1), 0.0, out, (k, 1));
            } else {
                // db[k×n] = aᵀ · dy
                gemm(k, m, n, av, (1, k), gv, (n, 1), 0.0, out, (n, 1));
            }
        }
        db
    });
    Ok((
        da.map(|d| Tensor::new(a.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(b.shape(), d)).transpose()?,
    ))
}

/// `x·wᵀ + bias` for `x: [B,Din]`, `w: [Dout,Din]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dout = match *w.shape() {
        [dout, _] => dout,
        ref s => {
            return Err(Error::shape(format!(
                "linear: weight must be 2-d, got {s:?}"
            )))
        }
    };
    if bias.shape() != [dout] {
        return Err(Error::shape(format!(
            "linear: bias shape {:?}, expected [{dout}]",
            bias.shape()
        )));
    }
    let mut y = matmul(x, w, true)?;
    for row in y.data_mut().chunks_mut(dout) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let l = *x.shape().last().expect("non-empty shape");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Given the softmax output `y` and upstream gradient `dy`.
pub fn softmax_lastdim_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let l = *y.shape().last().expect("non-empty shape");
    let mut dx = dy.clone();
    for (g, yr) in dx.data_mut().chunks_mut(l).zip(y.data().chunks(l)) {
        let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
        for (gv, yv) in g.iter_mut().zip(yr) {
            *gv = yv * (*gv - dot);
        }
    }
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "global_avg_pool")?;
    let hw = h * w;
    let data = x
        .data()
        .chunks(hw)
        .map(|s| s.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[b, c], data)
}

/// Leading axis, channel axis and the flattened remainder.
fn bcr(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.ndim() < 2 {
        return Err(Error::shape(format!(
            "{what}: need at least 2 dims, got {:?}",
            t.shape()
        )));
    }
    let rest: usize = t.shape()[2..].iter().product();
    Ok((t.shape()[0], t.shape()[1], rest))
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let (b, _, rest) = bcr(first, "concat")?;
    let mut total = 0;
    for x in xs {
        let (xb, xc, _) = bcr(x, "concat")?;
        if xb != b || x.shape()[2..] != first.shape()[2..] {
            return Err(Error::shape(format!(
                "concat: {:?} incompatible with {:?}",
                x.shape(),
                first.shape()
            )));
        }
        total += xc;
    }
    let mut data = Vec::with_capacity(b * total * rest);
    for bi in 0..b {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[bi * c * rest..(bi + 1) * c * rest]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    Tensor::new(&shape, data)
}

/// Channels `[start, start+len)` of `x`.
pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (b, c, rest) = bcr(x, "narrow")?;
    if len == 0 || start + len > c {
        return Err(Error::shape(format!(
            "narrow: channels {start}..{} out of {c}",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(b * len * rest);
    for bi in 0..b {
        let off = (bi * c + start) * rest;
        data.extend_from_slice(&x.data()[off..off + len * rest]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::new(&shape, data)
}

/// Adjoint of [`narrow_channels`]: embed `g` into zeros of `full_shape`.
fn pad_channels(g: &Tensor, full_shape: &[usize], start: usize) -> Tensor {
    let b = full_shape[0];
    let c = full_shape[1];
    let len = g.shape()[1];
    let rest: usize = full_shape[2..].iter().product();
    let mut out = Tensor::zeros(full_shape);
    for bi in 0..b {
        let off = (bi * c + start) * rest;
        out.data_mut()[off..off + len * rest]
            .copy_from_slice(&g.data()[bi * len * rest..(bi + 1) * len * rest]);
    }
    out
}

pub(crate) fn narrow_channels_backward(g: &Tensor, full_shape: &[usize], start: usize) -> Tensor {
    pad_channels(g, full_shape, start)
}

/// `x[b,c,…]·w[b,c]`, broadcasting `w` over the trailing axes.
pub fn mul_channelwise(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, rest) = bcr(x, "mul_channelwise")?;
    if w.shape() != [b, c] {
        return Err(Error::shape(format!(
            "mul_channelwise: weights {:?}, expected [{b}, {c}]",
            w.shape()
        )));
    }
    let mut out = x.clone();
    for (chunk, &s) in out.data_mut().chunks_mut(rest).zip(w.data()) {
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Repeat a `[C]` vector to `[B,C,H,W]`.
pub fn broadcast_channels(v: &Tensor, batch: usize, h: usize, w: usize) -> Result<Tensor> {
    if v.ndim() != 1 {
        return Err(Error::shape(format!(
            "broadcast_channels: expected 1-d, got {:?}",
            v.shape()
        )));
    }
    let c = v.numel();
    let hw = h * w;
    let mut out = Tensor::zeros(&[batch, c, h, w]);
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        chunk.fill(v.data()[i % c]);
    }
    Ok(out)
}

/// `[B,C,H,W]` → `[B·heads, H·W, C/heads]`: spatial tokens per head.
pub fn heads_to_tokens(x: &Tensor, heads: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "heads_to_tokens")?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!(
            "heads_to_tokens: {c} channels not divisible into {heads} heads"
        )));
    }
    let dh = c / heads;
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for n in 0..heads {
            let tok = &mut out[(bi * heads + n) * hw * dh..(bi * heads + n + 1) * hw * dh];
            for d in 0..dh {
                let src = &x.data()[(bi * c + n * dh + d) * hw..(bi * c + n * dh + d + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    tok[p * dh + d] = v;
                }
            }
        }
    }
    Tensor::new(&[b * heads, hw, dh], out)
}

/// Inverse of [`heads_to_tokens`].
pub fn tokens_to_heads(t: &Tensor, heads: usize, h: usize, w: usize) -> Result<Tensor> {
    let (bh, hw, dh) = match *t.shape() {
        [a, b, c] => (a, b, c),
        ref s => {
            return Err(Error::shape(format!(
                "tokens_to_heads: expected 3-d, got {s:?}"
            )))
        }
    };
    if heads == 0 || bh % heads != 0 || hw != h * w {
        return Err(Error::shape(format!(
            "tokens_to_heads: {:?} incompatible with {heads} heads at {h}x{w}",
            t.shape()
        )));
    }
    let b = bh / heads;
    let c = heads * dh;
    let mut out = vec![0.0; t.numel()];
    for bi in 0..b {
        for n in 0..heads {
            let tok = &t.data()[(bi * heads + n) * hw * dh..(bi * heads + n + 1) * hw * dh];
            for d in 0..dh {
                let dst = &mut out[(bi * c + n * dh + d) * hw..(bi * c + n * dh + d + 1) * hw];
                for (p, v) in dst.iter_mut().enumerate() {
                    *v = tok[p * dh + d];
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Space-to-depth: `[B,c,H,W]` → `[B,c·p²,H/p,W/p]`, with output channel
/// `(ci·p + di)·p + dj` holding pixel `(i·p+di, j·p+dj)` of input channel `ci`.
pub fn space_to_depth(x: &Tensor, p: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "space_to_depth")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "space_to_depth: {h}x{w} not divisible by patch {p}"
        )));
    }
    let (oh, ow) = (h / p, w / p);
    let oc = c * p * p;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for di in 0..p {
                for dj in 0..p {
                    let o = (ci * p + di) * p + dj;
                    for i in 0..oh {
                        for j in 0..ow {
                            out[((bi * oc + o) * oh + i) * ow + j] =
                                x.data()[((bi * c + ci) * h + i * p + di) * w + j * p + dj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, oc, oh, ow], out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    let [b, oc, oh, ow] = dims4(x, "depth_to_space")?;
    if p == 0 || oc % (p * p) != 0 {
        return Err(Error::shape(format!(
            "depth_to_space: {oc} channels not divisible by {}",
            p * p
        )));
    }
    let c = oc / (p * p);
    let (h, w) = (oh * p, ow * p);
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for di in 0..p {
                for dj in 0..p {
                    let o = (ci * p + di) * p + dj;
                    for i in 0..oh {
                        for j in 0..ow {
                            out[((bi * c + ci) * h + i * p + di) * w + j * p + dj] =
                                x.data()[((bi * oc + o) * oh + i) * ow + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}
