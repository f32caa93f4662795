//! Token to feature-map projection.

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Var};

/// `query: [C, d]`, `key: [Ctok, d]`, `value: [Ctok, C]`.
pub struct ProjectorWeights<'t, T: Scalar> {
    pub query: Var<'t, T>,
    pub key: Var<'t, T>,
    pub value: Var<'t, T>,
}

/// `X_out = X + softmax_L((X W_Q)(T W_K)^T) (T W_V)`.
///
/// `x` is `[N, C, H, W]`, `t` is `[N, L, Ctok]`. Returns the updated map and
/// the `[N, HW, L]` projection weights. The logits are evaluated as
/// `X (W_Q (T W_K)^T)`, which keeps the per-pixel cost at `C L`.
pub fn project_tokens<'t, T: Scalar>(
    x: &Var<'t, T>,
    t: &Var<'t, T>,
    w: &ProjectorWeights<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let [n, c, h, wd] = *x.shape() else {
        return Err(TensorError::shape("project", format!("feature map must be NCHW, got {:?}", x.shape())));
    };
    let [tn, _, ct] = *t.shape() else {
        return Err(TensorError::shape("project", format!("tokens must be [N, L, C], got {:?}", t.shape())));
    };
    let (q, k, v) = (w.query.shape(), w.key.shape(), w.value.shape());
    if tn != n || q[0] != c || k[0] != ct || q[1] != k[1] || v != [ct, c] {
        return Err(TensorError::shape(
            "project",
            format!("map {:?}, tokens {:?}, W_Q {q:?}, W_K {k:?}, W_V {v:?}", x.shape(), t.shape()),
        ));
    }
    let xc = x.reshape(&[n, c, h * wd])?;
    let keys = t.matmul(&w.key)?;
    let mixed = w.query.matmul_t(false, &keys, true)?;
    let p = xc.matmul_t(true, &mixed, false)?.softmax(2)?;
    let values = t.matmul(&w.value)?;
    let delta = values.matmul_t(true, &p, true)?;
    let out = xc.add(&delta)?.reshape(&[n, c, h, wd])?;
    Ok((out, p))
}

/// Multiply-accumulates of [`project_tokens`] for one sample.
pub fn projector_macs(pixels: usize, c: usize, l: usize, c_tok: usize, d: usize) -> u64 {
    let (p, c, l, ct, d) = (pixels as u64, c as u64, l as u64, c_tok as u64, d as u64);
    l * ct * d + c * d * l + p * c * l + l * ct * c + p * l * c
}
