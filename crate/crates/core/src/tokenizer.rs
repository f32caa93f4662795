//! Feature map to visual tokens.
//!
//! Feature maps arrive as `[N, C, H, W]`; the pixel matrix `X` of one sample
//! is the `HW x C` transpose of its `[C, HW]` view, so products against `X`
//! are expressed with transpose flags instead of copies. Tokens are
//! `[N, L, C]` and attention maps `[N, HW, L]`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::ops::{self, PoolMode};
use crate::tensor::{Scalar, Tensor, Var};

/// Default number of Lloyd iterations for the clustering tokenizer.
pub const KMEANS_ITERS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Filter,
    Recurrent,
    Pooling,
    Cluster,
}

impl TokenizerKind {
    pub fn emits_attention(self) -> bool {
        !matches!(self, TokenizerKind::Pooling)
    }
}

impl std::fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TokenizerKind::Filter => "filter",
            TokenizerKind::Recurrent => "recurrent",
            TokenizerKind::Pooling => "pooling",
            TokenizerKind::Cluster => "cluster",
        };
        f.write_str(s)
    }
}

/// Tokens and, for attention-based tokenizers, the spatial attention.
pub struct Tokenized<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub attention: Option<Var<'t, T>>,
}

fn pixels<'t, T: Scalar>(x: &Var<'t, T>) -> Result<(Var<'t, T>, usize, usize)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(TensorError::shape("tokenize", format!("feature map must be NCHW, got {:?}", x.shape())));
    };
    Ok((x.reshape(&[n, c, h * w])?, c, h * w))
}

/// `A = softmax_HW(logits)`, `T = A^T X`.
fn attend<'t, T: Scalar>(xc: &Var<'t, T>, logits: Var<'t, T>) -> Result<Tokenized<'t, T>> {
    let a = logits.softmax(1)?;
    let tokens = a.matmul_t(true, xc, true)?;
    Ok(Tokenized { tokens, attention: Some(a) })
}

/// Filter-based tokenizer with grouping weights `w_a: [C, L]`.
pub fn filter_tokenize<'t, T: Scalar>(x: &Var<'t, T>, w_a: &Var<'t, T>) -> Result<Tokenized<'t, T>> {
    let (xc, c, _) = pixels(x)?;
    if w_a.shape().len() != 2 || w_a.shape()[0] != c {
        return Err(TensorError::shape("filter_tokenize", format!("W_A {:?} for {c} channels", w_a.shape())));
    }
    let logits = xc.matmul_t(true, w_a, false)?;
    attend(&xc, logits)
}

/// Recurrent tokenizer: grouping weights `W_R = T_in W_{T->R}` come from the
/// previous block's tokens `t_in: [N, L, Ctok]`; `w_t2r: [Ctok, C]`.
pub fn recurrent_tokenize<'t, T: Scalar>(
    x: &Var<'t, T>,
    t_in: &Var<'t, T>,
    w_t2r: &Var<'t, T>,
) -> Result<Tokenized<'t, T>> {
    let (xc, c, _) = pixels(x)?;
    if w_t2r.shape().len() != 2 || w_t2r.shape()[1] != c {
        return Err(TensorError::shape("recurrent_tokenize", format!("W_T->R {:?} for {c} channels", w_t2r.shape())));
    }
    if t_in.shape().len() != 3 || t_in.shape()[0] != x.shape()[0] {
        return Err(TensorError::shape(
            "recurrent_tokenize",
            format!("tokens {:?} for feature map {:?}", t_in.shape(), x.shape()),
        ));
    }
    let w_r = t_in.matmul(w_t2r)?;
    let logits = xc.matmul_t(true, &w_r, true)?;
    attend(&xc, logits)
}

/// Side of the square pooling grid for `l` tokens.
pub fn square_side(l: usize) -> Option<usize> {
    let s = (l as f64).sqrt().round() as usize;
    (s >= 1 && s * s == l).then_some(s)
}

/// Pooling baseline: adaptive average pool to a `sqrt(L) x sqrt(L)` grid,
/// one token per cell in row-major order.
pub fn pooling_tokenize<'t, T: Scalar>(x: &Var<'t, T>, l: usize) -> Result<Tokenized<'t, T>> {
    let side = square_side(l)
        .ok_or_else(|| TensorError::invalid("pooling_tokenize", format!("{l} tokens is not a perfect square")))?;
    let [n, c, _, _] = *x.shape() else {
        return Err(TensorError::shape("pooling_tokenize", format!("expected NCHW, got {:?}", x.shape())));
    };
    let pooled = x.pool2d(PoolMode::AdaptiveAvg { oh: side, ow: side })?;
    let tokens = pooled.reshape(&[n, c, l])?.transpose_last2();
    Ok(Tokenized { tokens, attention: None })
}

/// Grid used to lay out `l` initial centroids: the most square factorisation
/// with rows <= columns.
pub fn centroid_grid(l: usize) -> (usize, usize) {
    let rows = (1..=l).take_while(|r| r * r <= l).filter(|r| l % r == 0).last().unwrap_or(1);
    (rows, l / rows)
}

fn normalize_columns<T: Scalar>(m: &mut [T], rows: usize, cols: usize) {
    for j in 0..cols {
        let mut ss = T::zero();
        for i in 0..rows {
            ss += m[i * cols + j] * m[i * cols + j];
        }
        let norm = ss.sqrt();
        if norm == T::zero() {
            continue;
        }
        for i in 0..rows {
            m[i * cols + j] /= norm;
        }
    }
}

/// Lloyd's k-means over the pixels of each sample.
///
/// Centroids start as the adaptive-average downsample of `x` to `L` grid
/// cells; pixels and centroids are normalised to unit length along `C`
/// (zero vectors stay zero). Each iteration assigns every pixel to its
/// nearest centroid (squared Euclidean distance, ties to the lowest index),
/// replaces each centroid by the mean of its members (an empty cluster keeps
/// its centroid) and re-normalises. Returns `[N, C, L]`.
pub fn kmeans_centroids<T: Scalar>(x: &Tensor<T>, l: usize, niter: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = *x.shape() else {
        return Err(TensorError::shape("kmeans", format!("expected NCHW, got {:?}", x.shape())));
    };
    let (gh, gw) = centroid_grid(l);
    let init = ops::pool2d(x, PoolMode::AdaptiveAvg { oh: gh, ow: gw })?;
    let p = h * w;
    let mut out = init.into_data();
    for b in 0..n {
        let cent = &mut out[b * c * l..(b + 1) * c * l];
        normalize_columns(cent, c, l);
        let mut px = x.data()[b * c * p..(b + 1) * c * p].to_vec();
        normalize_columns(&mut px, c, p);
        let mut owner = vec![0usize; p];
        for _ in 0..niter {
            for (pi, slot) in owner.iter_mut().enumerate() {
                let mut best = T::infinity();
                for j in 0..l {
                    let mut d = T::zero();
                    for ch in 0..c {
                        let diff = px[ch * p + pi] - cent[ch * l + j];
                        d += diff * diff;
                    }
                    if d < best {
                        best = d;
                        *slot = j;
                    }
                }
            }
            let mut sums = vec![T::zero(); c * l];
            let mut counts = vec![0usize; l];
            for (pi, &j) in owner.iter().enumerate() {
                counts[j] += 1;
                for ch in 0..c {
                    sums[ch * l + j] += px[ch * p + pi];
                }
            }
            for j in 0..l {
                if counts[j] == 0 {
                    continue;
                }
                let denom = T::of(counts[j] as f64);
                for ch in 0..c {
                    cent[ch * l + j] = sums[ch * l + j] / denom;
                }
            }
            let mut fresh: Vec<T> = cent.to_vec();
            normalize_columns(&mut fresh, c, l);
            for j in 0..l {
                if counts[j] > 0 {
                    for ch in 0..c {
                        cent[ch * l + j] = fresh[ch * l + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, l], out)?.finite("kmeans")
}

/// MACs of the distance evaluations in [`kmeans_centroids`].
pub fn kmeans_macs(pixels: usize, channels: usize, l: usize, niter: usize) -> u64 {
    (niter * pixels * l * channels) as u64
}

/// Tokenizer with externally supplied grouping weights `w_k: [N, C, L]`.
pub fn centroid_tokenize<'t, T: Scalar>(x: &Var<'t, T>, w_k: &Var<'t, T>) -> Result<Tokenized<'t, T>> {
    let (xc, c, _) = pixels(x)?;
    if w_k.shape().len() != 3 || w_k.shape()[1] != c {
        return Err(TensorError::shape("cluster_tokenize", format!("W_K {:?} for {c} channels", w_k.shape())));
    }
    let logits = xc.matmul_t(true, w_k, false)?;
    attend(&xc, logits)
}

/// Clustering tokenizer: k-means centroids of the pixels serve as grouping
/// weights. Gradients do not flow through the centroids.
pub fn cluster_tokenize<'t, T: Scalar>(x: &Var<'t, T>, l: usize, niter: usize) -> Result<Tokenized<'t, T>> {
    let centroids = kmeans_centroids(x.value(), l, niter)?;
    let [_, c, h, w] = *x.shape() else { unreachable!("checked by kmeans") };
    x.tape().add_macs(kmeans_macs(x.shape()[0] * h * w, c, l, niter));
    let w_k = x.tape().constant(centroids);
    centroid_tokenize(x, &w_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn fmap(tape: &Tape<f64>, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Var<'_, f64> {
        tape.constant(Tensor::from_fn(&[1, c, h, w], f))
    }

    #[test]
    fn filter_scalar_case() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 2, 1], &[0.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::from_f64([1, 1], &[1.0]).unwrap());
        let out = filter_tokenize(&x, &w).unwrap();
        let e = std::f64::consts::E;
        let a = out.attention.unwrap();
        assert!((a.value().data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((a.value().data()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((out.tokens.value().item() - e / (1.0 + e)).abs() < 1e-15);
        assert!((out.tokens.value().item() - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn constant_map_gives_constant_tokens() {
        let tape = Tape::<f64>::new();
        let x = fmap(&tape, 3, 4, 4, |i| [0.3, -1.2, 2.0][i / 16]);
        let w = tape.constant(Tensor::from_fn(&[3, 5], |i| (i as f64).sin()));
        let out = filter_tokenize(&x, &w).unwrap();
        for v in out.attention.unwrap().value().data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
        let t = out.tokens.value();
        for l in 0..5 {
            for (ch, want) in [0.3, -1.2, 2.0].iter().enumerate() {
                assert!((t.get(&[0, l, ch]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn recurrent_zero_tokens_average_pixels() {
        let tape = Tape::<f64>::new();
        let x = fmap(&tape, 2, 3, 3, |i| (i as f64 * 0.37).cos());
        let t_in = tape.constant(Tensor::zeros(&[1, 4, 3]));
        let w = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let out = recurrent_tokenize(&x, &t_in, &w).unwrap();
        for ch in 0..2 {
            let mean: f64 = x.value().data()[ch * 9..(ch + 1) * 9].iter().sum::<f64>() / 9.0;
            for l in 0..4 {
                assert!((out.tokens.value().get(&[0, l, ch]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn recurrent_matches_filter_scalar_case() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 2, 1], &[0.0, 1.0]).unwrap());
        let t_in = tape.constant(Tensor::from_f64([1, 1, 1], &[1.0]).unwrap());
        let w = tape.constant(Tensor::from_f64([1, 1], &[1.0]).unwrap());
        let r = recurrent_tokenize(&x, &t_in, &w).unwrap();
        let f = filter_tokenize(&x, &w).unwrap();
        assert_eq!(r.tokens.value(), f.tokens.value());
    }

    #[test]
    fn pooling_requires_square_count() {
        let tape = Tape::<f64>::new();
        let x = fmap(&tape, 2, 8, 8, |i| i as f64);
        assert!(pooling_tokenize(&x, 8).is_err());
        let out = pooling_tokenize(&x, 16).unwrap();
        assert_eq!(out.tokens.shape(), &[1, 16, 2]);
        assert!(out.attention.is_none());
    }

    #[test]
    fn pooling_with_one_token_per_pixel_is_identity() {
        let tape = Tape::<f64>::new();
        let x = fmap(&tape, 3, 4, 4, |i| i as f64 * 0.5);
        let t = pooling_tokenize(&x, 16).unwrap().tokens;
        for p in 0..16 {
            for ch in 0..3 {
                assert_eq!(t.value().get(&[0, p, ch]), x.value().data()[ch * 16 + p]);
            }
        }
    }

    #[test]
    fn kmeans_identical_unit_pixels() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| if i < 16 { 0.6 } else { 0.8 });
        for niter in [0, 1, 5] {
            let u = kmeans_centroids(&x, 4, niter).unwrap();
            for j in 0..4 {
                assert!((u.get(&[0, 0, j]) - 0.6).abs() < 1e-15);
                assert!((u.get(&[0, 1, j]) - 0.8).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kmeans_zero_pixels_stay_zero() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let u = kmeans_centroids(&x, 4, 3).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_for_non_square_counts() {
        assert_eq!(centroid_grid(16), (4, 4));
        assert_eq!(centroid_grid(32), (4, 8));
        assert_eq!(centroid_grid(64), (8, 8));
        assert_eq!(centroid_grid(1), (1, 1));
    }

    #[test]
    fn single_cluster_token_is_weighted_mean() {
        let tape = Tape::<f64>::new();
        let x = fmap(&tape, 2, 3, 3, |i| (i as f64 * 1.3).sin() + 0.1);
        let out = cluster_tokenize(&x, 1, 4).unwrap();
        let a = out.attention.unwrap();
        let s: f64 = a.value().data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
