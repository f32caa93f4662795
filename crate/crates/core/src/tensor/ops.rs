//! Forward and backward kernels on plain tensors.
//!
//! These functions do not record anything; [`super::tape`] wraps them into
//! differentiable operations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gemm, parallel_enabled, MatView, Scalar, Tensor};
use crate::error::{Result, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::shape("matmul", "both operands must be rank 2"));
    }
    matmul_t(a, false, b, false)
}

/// Shape bookkeeping for [`matmul_t`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub a: MatView,
    pub b: MatView,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<MatmulDims> {
    let view = |t: &Tensor<T>, tr: bool| -> Result<(usize, MatView)> {
        match t.shape() {
            [r, c] => Ok((0, MatView::new(*r, *c, tr))),
            [bt, r, c] => Ok((*bt, MatView::new(*r, *c, tr))),
            s => Err(TensorError::shape("matmul", format!("operand rank {} not in {{2, 3}}", s.len()))),
        }
    };
    let (ba, av) = view(a, ta)?;
    let (bb, bv) = view(b, tb)?;
    let (m, k) = av.dims();
    let (k2, n) = bv.dims();
    if k != k2 {
        return Err(TensorError::shape(
            "matmul",
            format!("inner extents {k} vs {k2} (a {:?} t={ta}, b {:?} t={tb})", a.shape(), b.shape()),
        ));
    }
    if ba > 0 && bb > 0 && ba != bb {
        return Err(TensorError::shape("matmul", format!("batch {ba} vs {bb}")));
    }
    Ok(MatmulDims { batch: ba.max(bb), a_batched: ba > 0, b_batched: bb > 0, a: av, b: bv, m, k, n })
}

/// Batched product `op(a) * op(b)` where `op` optionally transposes the last
/// two axes. Rank-2 operands broadcast across the batch of a rank-3 partner.
pub fn matmul_t<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a, ta, b, tb)?;
    let (m, n) = (d.m, d.n);
    let a_step = d.a.rows * d.a.cols;
    let b_step = d.b.rows * d.b.cols;
    if d.batch == 0 {
        let mut out = vec![T::zero(); m * n];
        gemm(a.data(), d.a, b.data(), d.b, T::zero(), &mut out);
        return Tensor::from_parts(vec![m, n], out).finite("matmul");
    }
    let mut out = vec![T::zero(); d.batch * m * n];
    for (i, chunk) in out.chunks_mut(m * n).enumerate() {
        let ao = if d.a_batched { i * a_step } else { 0 };
        let bo = if d.b_batched { i * b_step } else { 0 };
        gemm(&a.data()[ao..ao + a_step], d.a, &b.data()[bo..bo + b_step], d.b, T::zero(), chunk);
    }
    Tensor::from_parts(vec![d.batch, m, n], out).finite("matmul")
}

/// Multiply-accumulate count of a [`matmul_t`] call.
pub fn matmul_macs<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> u64 {
    matmul_dims(a, ta, b, tb)
        .map(|d| (d.batch.max(1) * d.m * d.k * d.n) as u64)
        .unwrap_or(0)
}

/// Sum a batched tensor over its leading axis.
pub(crate) fn sum_leading<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let per = t.numel() / t.dim(0);
    let mut out = vec![T::zero(); per];
    for chunk in t.data().chunks(per) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(t.shape()[1..].to_vec(), out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::invalid("softmax", format!("axis {axis} >= rank {}", x.rank())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(src[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - mx).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[at(j)] /= s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).finite("softmax")
}

/// Given `y = softmax(x)` and upstream `dy`, returns `dx`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += yd[at(j)] * gd[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Geometry of a square-kernel convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(op: &'static str, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(TensorError::invalid(op, format!("kernel {k}, stride {stride}")));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::invalid(
                op,
                format!("window {k} with pad {pad} exceeds input {h}x{w}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Window { h, w, k, stride, pad, oh, ow })
    }

    /// Input coordinate for output position `o` and kernel offset `ki`.
    #[inline]
    fn src(&self, o: usize, ki: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + ki) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }
}

/// Output columns `lo..hi` whose input column `xo * stride + kj - pad` lies
/// inside `0..extent`.
fn valid_span(g: &Window, kj: usize, extent: usize, outs: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let limit = extent + g.pad;
    let hi = if limit > kj { ((limit - kj - 1) / g.stride + 1).min(outs) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], c: usize, g: &Window) -> Vec<T> {
    let k = g.k;
    let p = g.oh * g.ow;
    let mut col = vec![T::zero(); c * k * k * p];
    for ch in 0..c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..k {
            let (ylo, yhi) = valid_span(g, ki, g.h, g.oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_span(g, kj, g.w, g.ow);
                let row = &mut col[((ch * k + ki) * k + kj) * p..][..p];
                for y in ylo..yhi {
                    let src = &plane[(y * g.stride + ki - g.pad) * g.w..][..g.w];
                    let dst = &mut row[y * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let off = xlo + kj - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                    } else {
                        for xo in xlo..xhi {
                            dst[xo] = src[xo * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], c: usize, g: &Window, dx: &mut [T]) {
    let k = g.k;
    let p = g.oh * g.ow;
    for ch in 0..c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..k {
            let (ylo, yhi) = valid_span(g, ki, g.h, g.oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_span(g, kj, g.w, g.ow);
                let row = &col[((ch * k + ki) * k + kj) * p..][..p];
                for y in ylo..yhi {
                    let dst = &mut plane[(y * g.stride + ki - g.pad) * g.w..][..g.w];
                    let src = &row[y * g.ow..][..g.ow];
                    for xo in xlo..xhi {
                        dst[xo * g.stride + kj - g.pad] += src[xo];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Window) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

pub(crate) fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, Window)> {
    let [n, c, h, wd] = *x.shape() else {
        return Err(TensorError::shape("conv2d", format!("input must be NCHW, got {:?}", x.shape())));
    };
    let [o, wc, kh, kw] = *w.shape() else {
        return Err(TensorError::shape("conv2d", format!("weight must be OCkk, got {:?}", w.shape())));
    };
    if wc != c || kh != kw {
        return Err(TensorError::shape(
            "conv2d",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    if kh % 2 == 0 {
        return Err(TensorError::invalid("conv2d", format!("kernel {kh} must be odd")));
    }
    let g = Window::new("conv2d", h, wd, kh, stride, pad)?;
    Ok((n, c, o, g))
}

/// Cross-correlation of `x[N,C,H,W]` with `w[O,C,k,k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, c, o, g) = conv_geometry(x, w, stride, pad)?;
    let p = g.oh * g.ow;
    let ckk = c * g.k * g.k;
    let in_step = c * g.h * g.w;
    let mut out = vec![T::zero(); n * o * p];
    let run = |(i, dst): (usize, &mut [T])| {
        let xs = &x.data()[i * in_step..(i + 1) * in_step];
        if is_pointwise(&g) {
            gemm(w.data(), MatView::new(o, ckk, false), xs, MatView::new(ckk, p, false), T::zero(), dst);
        } else {
            let col = im2col(xs, c, &g);
            gemm(w.data(), MatView::new(o, ckk, false), &col, MatView::new(ckk, p, false), T::zero(), dst);
        }
    };
    if parallel_enabled() {
        out.par_chunks_mut(o * p).enumerate().for_each(run);
    } else {
        out.chunks_mut(o * p).enumerate().for_each(run);
    }
    Tensor::from_parts(vec![n, o, g.oh, g.ow], out).finite("conv2d")
}

pub fn conv2d_macs(n: usize, c: usize, o: usize, g: &Window) -> u64 {
    (n * o * g.oh * g.ow * c * g.k * g.k) as u64
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, o, g) = conv_geometry(x, w, stride, pad)?;
    let p = g.oh * g.ow;
    let ckk = c * g.k * g.k;
    let in_step = c * g.h * g.w;
    let wview = MatView::new(o, ckk, true);
    let per_sample = |i: usize, dx: &mut [T], dw: &mut [T], beta: T| {
        let xs = &x.data()[i * in_step..(i + 1) * in_step];
        let go = &dout.data()[i * o * p..(i + 1) * o * p];
        if is_pointwise(&g) {
            gemm(go, MatView::new(o, p, false), xs, MatView::new(ckk, p, true), beta, dw);
            gemm(w.data(), wview, go, MatView::new(o, p, false), T::zero(), dx);
        } else {
            let col = im2col(xs, c, &g);
            gemm(go, MatView::new(o, p, false), &col, MatView::new(ckk, p, true), beta, dw);
            let mut dcol = vec![T::zero(); ckk * p];
            gemm(w.data(), wview, go, MatView::new(o, p, false), T::zero(), &mut dcol);
            col2im(&dcol, c, &g, dx);
        }
    };
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    if parallel_enabled() {
        let partial: Vec<Vec<T>> = dx
            .par_chunks_mut(in_step)
            .enumerate()
            .map(|(i, dxs)| {
                let mut dws = vec![T::zero(); w.numel()];
                per_sample(i, dxs, &mut dws, T::zero());
                dws
            })
            .collect();
        for part in partial {
            for (a, b) in dw.iter_mut().zip(part) {
                *a += b;
            }
        }
    } else {
        for (i, dxs) in dx.chunks_mut(in_step).enumerate() {
            per_sample(i, dxs, &mut dw, if i == 0 { T::zero() } else { T::one() });
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Max { k: usize, stride: usize, pad: usize },
    /// Padded zeros count toward the divisor.
    Avg { k: usize, stride: usize, pad: usize },
    AdaptiveAvg { oh: usize, ow: usize },
}

/// `[start, end)` of adaptive bin `i` when splitting `len` cells into `out` bins.
pub fn adaptive_range(i: usize, len: usize, out: usize) -> (usize, usize) {
    ((i * len) / out, ((i + 1) * len).div_ceil(out))
}

fn nchw<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::shape(op, format!("expected NCHW, got {:?}", x.shape()))),
    }
}

fn pool_window(mode: PoolMode, h: usize, w: usize) -> Result<Window> {
    match mode {
        PoolMode::Max { k, stride, pad } | PoolMode::Avg { k, stride, pad } => {
            if 2 * pad > k {
                return Err(TensorError::invalid("pool2d", format!("pad {pad} exceeds half window {k}")));
            }
            Window::new("pool2d", h, w, k, stride, pad)
        }
        PoolMode::AdaptiveAvg { oh, ow } => {
            if oh == 0 || ow == 0 || oh > h || ow > w {
                return Err(TensorError::invalid(
                    "pool2d",
                    format!("adaptive target {oh}x{ow} for input {h}x{w}"),
                ));
            }
            Ok(Window { h, w, k: 0, stride: 0, pad: 0, oh, ow })
        }
    }
}

/// Pooling forward. For max pooling also returns the winning flat in-plane
/// index of every output cell.
pub(crate) fn pool2d_with_index<T: Scalar>(
    x: &Tensor<T>,
    mode: PoolMode,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let (n, c, h, w) = nchw("pool2d", x)?;
    let g = pool_window(mode, h, w)?;
    let planes = n * c;
    let mut out = vec![T::zero(); planes * g.oh * g.ow];
    let mut arg = matches!(mode, PoolMode::Max { .. }).then(|| vec![0usize; out.len()]);
    for pl in 0..planes {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for y in 0..g.oh {
            for xo in 0..g.ow {
                let o = pl * g.oh * g.ow + y * g.ow + xo;
                match mode {
                    PoolMode::Max { .. } => {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for ki in 0..g.k {
                            let Some(iy) = g.src(y, ki, h) else { continue };
                            for kj in 0..g.k {
                                if let Some(ix) = g.src(xo, kj, w) {
                                    let v = src[iy * w + ix];
                                    if v > best {
                                        best = v;
                                        at = iy * w + ix;
                                    }
                                }
                            }
                        }
                        out[o] = best;
                        if let Some(a) = arg.as_mut() {
                            a[o] = at;
                        }
                    }
                    PoolMode::Avg { .. } => {
                        let mut s = T::zero();
                        for ki in 0..g.k {
                            let Some(iy) = g.src(y, ki, h) else { continue };
                            for kj in 0..g.k {
                                if let Some(ix) = g.src(xo, kj, w) {
                                    s += src[iy * w + ix];
                                }
                            }
                        }
                        out[o] = s / T::of((g.k * g.k) as f64);
                    }
                    PoolMode::AdaptiveAvg { oh, ow } => {
                        let (h0, h1) = adaptive_range(y, h, oh);
                        let (w0, w1) = adaptive_range(xo, w, ow);
                        let mut s = T::zero();
                        for yy in h0..h1 {
                            for xx in w0..w1 {
                                s += src[yy * w + xx];
                            }
                        }
                        out[o] = s / T::of(((h1 - h0) * (w1 - w0)) as f64);
                    }
                }
            }
        }
    }
    let t = Tensor::from_parts(vec![n, c, g.oh, g.ow], out).finite("pool2d")?;
    Ok((t, arg))
}

pub fn pool2d<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    pool2d_with_index(x, mode).map(|(t, _)| t)
}

pub(crate) fn pool2d_backward<T: Scalar>(
    in_shape: &[usize],
    mode: PoolMode,
    argmax: Option<&[usize]>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let planes = in_shape[0] * in_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    let g = pool_window(mode, h, w).expect("validated in forward");
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let o = pl * oh * ow + y * ow + xo;
                let gv = dy.data()[o];
                match mode {
                    PoolMode::Max { .. } => {
                        dst[argmax.expect("max pool keeps indices")[o]] += gv;
                    }
                    PoolMode::Avg { k, .. } => {
                        let share = gv / T::of((k * k) as f64);
                        for ki in 0..k {
                            let Some(iy) = g.src(y, ki, h) else { continue };
                            for kj in 0..k {
                                if let Some(ix) = g.src(xo, kj, w) {
                                    dst[iy * w + ix] += share;
                                }
                            }
                        }
                    }
                    PoolMode::AdaptiveAvg { oh: th, ow: tw } => {
                        let (h0, h1) = adaptive_range(y, h, th);
                        let (w0, w1) = adaptive_range(xo, w, tw);
                        let share = gv / T::of(((h1 - h0) * (w1 - w0)) as f64);
                        for yy in h0..h1 {
                            for xx in w0..w1 {
                                dst[yy * w + xx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: Tensor::zeros(&[channels]), var: Tensor::ones(&[channels]) }
    }

    /// Momentum update with batch mean and unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::of(BN_MOMENTUM);
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var_unbiased) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// Everything the backward pass of batch norm needs.
pub(crate) struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

/// Sum of `f(v)` over `xs` using eight interleaved accumulators.
pub(crate) fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v);
        }
    }
    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for &v in rest {
        total += f(v);
    }
    total
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BnStats<T>,
    mode: BnMode,
) -> Result<BnForward<T>> {
    let (n, c, h, w) = nchw("batch_norm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::shape(
            "batch_norm",
            format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let m = n * hw;
    let eps = T::of(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    match mode {
        BnMode::Train => {
            for ch in 0..c {
                let plane = |b: usize| &x.data()[(b * c + ch) * hw..][..hw];
                let s: T = (0..n).map(|b| lane_sum(plane(b), |v| v)).sum();
                let mu = s / T::of(m as f64);
                let ss: T = (0..n).map(|b| lane_sum(plane(b), |v| (v - mu) * (v - mu))).sum();
                mean[ch] = mu;
                var[ch] = ss / T::of(m as f64);
                var_unbiased[ch] = if m > 1 { ss / T::of((m - 1) as f64) } else { var[ch] };
            }
        }
        BnMode::Eval => {
            mean.copy_from_slice(stats.mean.data());
            var.copy_from_slice(stats.var.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok(BnForward {
        out: Tensor::from_parts(x.shape().to_vec(), out).finite("batch_norm")?,
        xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
        batch_mean: mean,
        batch_var_unbiased: var_unbiased,
    })
}

/// Batch normalisation over `N x H x W` per channel.
///
/// Train mode normalises with batch statistics and folds them into `stats`;
/// eval mode normalises with `stats`.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let f = batch_norm_forward(x, gamma, beta, stats, mode)?;
    if mode == BnMode::Train {
        stats.update(&f.batch_mean, &f.batch_var_unbiased);
    }
    Ok(f.out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    mode: BnMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = (dy.dim(0), dy.dim(1), dy.dim(2) * dy.dim(3));
    let m = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, xh) = (&dy.data()[base..base + hw], &xhat.data()[base..base + hw]);
            dbeta[ch] += lane_sum(g, |v| v);
            let mut acc = [T::zero(); 8];
            let (gc, xc) = (g.chunks_exact(8), xh.chunks_exact(8));
            let tail: T = gc.remainder().iter().zip(xc.remainder()).map(|(&a, &b)| a * b).sum();
            for (ga, xa) in gc.zip(xc) {
                for j in 0..8 {
                    acc[j] += ga[j] * xa[j];
                }
            }
            dgamma[ch] += acc.iter().copied().sum::<T>() + tail;
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let gi = gamma.data()[ch] * inv_std[ch];
            let (db, dg) = (dbeta[ch], dgamma[ch]);
            let (g, xh) = (&dy.data()[base..base + hw], &xhat.data()[base..base + hw]);
            let dst = &mut dx[base..base + hw];
            match mode {
                BnMode::Train => {
                    let scale = gi / m;
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
                        *d = scale * (m * gv - db - xv * dg);
                    }
                }
                BnMode::Eval => {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = gi * gv;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Source taps for bilinear resampling with half-pixel centres.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an NCHW tensor (half-pixel centres, no corner alignment).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("upsample", x)?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::invalid("upsample", "zero target extent"));
    }
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for pl in 0..n * c {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                out[pl * oh * ow + y * ow + xo] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out).finite("upsample")
}

pub(crate) fn upsample_bilinear_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let planes = in_shape[0] * in_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let g = dy.data()[pl * oh * ow + y * ow + xo];
                dst[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                dst[y0 * w + x1] += g * (T::one() - ly) * lx;
                dst[y1 * w + x0] += g * ly * (T::one() - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}
