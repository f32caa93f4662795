//! Token-to-token interaction: single-head self-attention followed by a
//! two-layer pointwise feed-forward, both residual.

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Var};

/// Weights of one token transformer.
///
/// `key`/`query` are `[Ctok, d]`, `ffn_in`/`ffn_out` are `[Ctok, Ctok]`.
pub struct TransformerWeights<'t, T: Scalar> {
    pub key: Var<'t, T>,
    pub query: Var<'t, T>,
    pub ffn_in: Var<'t, T>,
    pub ffn_out: Var<'t, T>,
}

fn check_tokens<T: Scalar>(op: &'static str, t: &Var<'_, T>) -> Result<usize> {
    match *t.shape() {
        [_, _, c] => Ok(c),
        _ => Err(TensorError::shape(op, format!("tokens must be [N, L, C], got {:?}", t.shape()))),
    }
}

/// `T + softmax_rows((T K)(T Q)^T) T`. Returns the output and the `[N, L, L]`
/// attention.
pub fn token_self_attention<'t, T: Scalar>(
    t: &Var<'t, T>,
    key: &Var<'t, T>,
    query: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let c = check_tokens("self_attention", t)?;
    if key.shape()[0] != c || query.shape()[0] != c || key.shape() != query.shape() {
        return Err(TensorError::shape(
            "self_attention",
            format!("key {:?} / query {:?} for {c}-channel tokens", key.shape(), query.shape()),
        ));
    }
    let tk = t.matmul(key)?;
    let tq = t.matmul(query)?;
    let s = tk.matmul_t(false, &tq, true)?.softmax(2)?;
    let out = t.add(&s.matmul(t)?)?;
    Ok((out, s))
}

/// `T + relu(T F1) F2`.
pub fn token_ffn<'t, T: Scalar>(t: &Var<'t, T>, ffn_in: &Var<'t, T>, ffn_out: &Var<'t, T>) -> Result<Var<'t, T>> {
    check_tokens("ffn", t)?;
    let hidden = t.matmul(ffn_in)?.relu();
    t.add(&hidden.matmul(ffn_out)?)
}

pub fn transformer_forward<'t, T: Scalar>(t: &Var<'t, T>, w: &TransformerWeights<'t, T>) -> Result<Var<'t, T>> {
    let (mixed, _) = token_self_attention(t, &w.key, &w.query)?;
    token_ffn(&mixed, &w.ffn_in, &w.ffn_out)
}

/// Multiply-accumulates for `l` tokens of width `c_tok` with attention width `d`.
pub fn transformer_macs(l: usize, c_tok: usize, d: usize) -> u64 {
    let (l, c, d) = (l as u64, c_tok as u64, d as u64);
    2 * l * c * d + l * l * d + l * l * c + 2 * l * c * c
}
