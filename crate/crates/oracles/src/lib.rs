//! Naive reference implementations.
//!
//! Everything here is written as straight-line loops over plain `f64`
//! buffers and nested `Vec`s. Nothing is shared with `vt-core`; tests compare
//! the two to catch indexing, layout and transpose mistakes.

/// Row-major `m x k` times `k x n`.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Cross-correlation of an `n x c x h x w` input with an `o x c x k x k` kernel.
/// Returns the output buffer and its spatial extents.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    assert_eq!(x.len(), n * c * h * w);
    assert_eq!(weight.len(), o * c * k * k);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xo * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((oc * c + ic) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Max pooling; padded positions never win.
pub fn max_pool2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (y * stride + ki) as isize - pad as isize;
                        let ix = (xo * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            let v = x[plane * h * w + iy as usize * w + ix as usize];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                }
                out[plane * oh * ow + y * ow + xo] = best;
            }
        }
    }
    (out, oh, ow)
}

/// Average pooling where padded zeros count toward the divisor.
pub fn avg_pool2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = 0.0;
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (y * stride + ki) as isize - pad as isize;
                        let ix = (xo * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            s += x[plane * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[plane * oh * ow + y * ow + xo] = s / (k * k) as f64;
            }
        }
    }
    (out, oh, ow)
}

/// Bin `i` of `out` bins over `len` cells covers `[floor(i*len/out), ceil((i+1)*len/out))`.
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for i in 0..oh {
            let (h0, h1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (w0, w1) = adaptive_bin(j, w, ow);
                let mut s = 0.0;
                for yy in h0..h1 {
                    for xx in w0..w1 {
                        s += x[plane * h * w + yy * w + xx];
                    }
                }
                out[plane * oh * ow + i * ow + j] = s / ((h1 - h0) * (w1 - w0)) as f64;
            }
        }
    }
    out
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for &a in v {
        ss += a * a;
    }
    let norm = ss.sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|a| a / norm).collect()
}

/// Grid used to lay out `l` initial centroids: the most square factorisation
/// with rows <= columns.
pub fn centroid_grid(l: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= l {
        if l % r == 0 {
            rows = r;
        }
        r += 1;
    }
    (rows, l / rows)
}

/// Textbook Lloyd's iteration on unit-normalised pixels.
///
/// Input `x` is `n x c x h x w`; output is `n x c x l`. Ties go to the lowest
/// centroid index, an empty cluster keeps its previous centroid, and
/// distances are compared squared.
pub fn lloyds(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), l: usize, niter: usize) -> Vec<f64> {
    let (gh, gw) = centroid_grid(l);
    let hw = h * w;
    let mut out = vec![0.0; n * c * l];
    for b in 0..n {
        // pixels[p] is a c-vector
        let mut pixels: Vec<Vec<f64>> = Vec::with_capacity(hw);
        for p in 0..hw {
            let v: Vec<f64> = (0..c).map(|ch| x[(b * c + ch) * hw + p]).collect();
            pixels.push(unit(&v));
        }
        let mut cents: Vec<Vec<f64>> = Vec::with_capacity(l);
        for i in 0..gh {
            let (h0, h1) = adaptive_bin(i, h, gh);
            for j in 0..gw {
                let (w0, w1) = adaptive_bin(j, w, gw);
                let mut v = vec![0.0; c];
                for (ch, slot) in v.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for yy in h0..h1 {
                        for xx in w0..w1 {
                            s += x[((b * c + ch) * h + yy) * w + xx];
                        }
                    }
                    *slot = s / ((h1 - h0) * (w1 - w0)) as f64;
                }
                cents.push(unit(&v));
            }
        }
        for _ in 0..niter {
            let mut owner = vec![0usize; hw];
            for p in 0..hw {
                let mut best = f64::INFINITY;
                for (j, u) in cents.iter().enumerate() {
                    let mut d = 0.0;
                    for ch in 0..c {
                        let diff = pixels[p][ch] - u[ch];
                        d += diff * diff;
                    }
                    if d < best {
                        best = d;
                        owner[p] = j;
                    }
                }
            }
            let mut next = Vec::with_capacity(l);
            for (j, prev) in cents.iter().enumerate() {
                let mut count = 0usize;
                let mut sum = vec![0.0; c];
                for p in 0..hw {
                    if owner[p] == j {
                        count += 1;
                        for ch in 0..c {
                            sum[ch] += pixels[p][ch];
                        }
                    }
                }
                if count == 0 {
                    next.push(prev.clone());
                } else {
                    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
                    next.push(unit(&mean));
                }
            }
            cents = next;
        }
        for (j, u) in cents.iter().enumerate() {
            for ch in 0..c {
                out[(b * c + ch) * l + j] = u[ch];
            }
        }
    }
    out
}

/// Dense matrix as rows.
pub type Mat = Vec<Vec<f64>>;

fn rows(m: &Mat) -> usize {
    m.len()
}

fn cols(m: &Mat) -> usize {
    m.first().map_or(0, Vec::len)
}

/// Scalar-loop transcriptions of the visual-transformer equations.
pub mod vt_scalar {
    use super::{cols, rows, Mat};

    fn mm(a: &Mat, b: &Mat) -> Mat {
        let (m, k, n) = (rows(a), cols(a), cols(b));
        assert_eq!(k, rows(b));
        let mut out = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i][p] * b[p][j];
                }
                out[i][j] = s;
            }
        }
        out
    }

    fn tr(a: &Mat) -> Mat {
        let (m, n) = (rows(a), cols(a));
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..m {
            for j in 0..n {
                out[j][i] = a[i][j];
            }
        }
        out
    }

    /// Softmax down each column (over rows).
    fn softmax_cols(a: &Mat) -> Mat {
        tr(&softmax_rows(&tr(a)))
    }

    /// Softmax along each row (over columns).
    fn softmax_rows(a: &Mat) -> Mat {
        a.iter()
            .map(|r| {
                let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    /// Filter tokenizer: returns `(T, A)`.
    pub fn filter_tokenize(x: &Mat, w_a: &Mat) -> (Mat, Mat) {
        let a = softmax_cols(&mm(x, w_a));
        (mm(&tr(&a), x), a)
    }

    /// Recurrent tokenizer with `W_R = T_in W_{T->R}`, logits `X W_R^T`.
    pub fn recurrent_tokenize(x: &Mat, t_in: &Mat, w_t2r: &Mat) -> (Mat, Mat) {
        let w_r = mm(t_in, w_t2r);
        let a = softmax_cols(&mm(x, &tr(&w_r)));
        (mm(&tr(&a), x), a)
    }

    /// Tokenizer driven by fixed centroids `W_K` (C x L).
    pub fn centroid_tokenize(x: &Mat, w_k: &Mat) -> (Mat, Mat) {
        filter_tokenize(x, w_k)
    }

    /// `T + softmax_rows((T K)(T Q)^T) T`, also returning the attention.
    pub fn self_attention(t: &Mat, k: &Mat, q: &Mat) -> (Mat, Mat) {
        let s = softmax_rows(&mm(&mm(t, k), &tr(&mm(t, q))));
        (add(t, &mm(&s, t)), s)
    }

    /// `T + relu(T F1) F2`.
    pub fn ffn(t: &Mat, f1: &Mat, f2: &Mat) -> Mat {
        let h: Mat = mm(t, f1)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        add(t, &mm(&h, f2))
    }

    pub fn transformer(t: &Mat, k: &Mat, q: &Mat, f1: &Mat, f2: &Mat) -> Mat {
        ffn(&self_attention(t, k, q).0, f1, f2)
    }

    /// `X + softmax_rows((X W_Q)(T W_K)^T) (T W_V)`, evaluated left to right.
    pub fn project(x: &Mat, t: &Mat, w_q: &Mat, w_k: &Mat, w_v: &Mat) -> (Mat, Mat) {
        let p = softmax_rows(&mm(&mm(x, w_q), &tr(&mm(t, w_k))));
        (add(x, &mm(&p, &mm(t, w_v))), p)
    }

    /// Weights of one block, all as row matrices mapping inputs to outputs.
    pub struct BlockWeights {
        /// Pixel channel adapter, `c_in x c_out`, absent when the widths agree.
        pub channel_adapter: Option<Mat>,
        /// `W_A` (filter) or `W_{T->R}` (recurrent).
        pub tokenizer: Mat,
        pub recurrent: bool,
        /// `c_out x c_tok`, absent when the widths agree.
        pub token_adapter: Option<Mat>,
        pub k: Mat,
        pub q: Mat,
        pub f1: Mat,
        pub f2: Mat,
        /// `(W_Q, W_K, W_V)`; `None` runs without a projector.
        pub projector: Option<(Mat, Mat, Mat)>,
    }

    /// One block on a single sample; returns `(X_out, T_out, A)`.
    pub fn vt_block(x_in: &Mat, t_prev: Option<&Mat>, wts: &BlockWeights) -> (Mat, Mat, Mat) {
        let x = match &wts.channel_adapter {
            Some(m) => mm(x_in, m),
            None => x_in.clone(),
        };
        let (t, a) = if wts.recurrent {
            recurrent_tokenize(&x, t_prev.expect("recurrent block needs tokens"), &wts.tokenizer)
        } else {
            filter_tokenize(&x, &wts.tokenizer)
        };
        let t = match &wts.token_adapter {
            Some(m) => mm(&t, m),
            None => t,
        };
        let t = transformer(&t, &wts.k, &wts.q, &wts.f1, &wts.f2);
        let x_out = match &wts.projector {
            Some((wq, wk, wv)) => project(&x, &t, wq, wk, wv).0,
            None => x,
        };
        (x_out, t, a)
    }
}
