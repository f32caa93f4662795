//! One visual-transformer block: tokenize, transform, project.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError, VtError};
use crate::projector::{project_tokens, projector_macs, ProjectorWeights};
use crate::tensor::{Scalar, Var};
use crate::tokenizer::{
    cluster_tokenize, filter_tokenize, kmeans_macs, pooling_tokenize, recurrent_tokenize, square_side, TokenizerKind,
    KMEANS_ITERS,
};
use crate::transformer::{transformer_forward, transformer_macs, TransformerWeights};

/// Upper bound on the self-attention key/query width.
pub const DEFAULT_ATTN_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VtBlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub c_tok: usize,
    pub tokens: usize,
    pub tokenizer: TokenizerKind,
    pub projector: bool,
    /// Key/query width of token self-attention.
    pub attn_dim: usize,
    /// Key/query width of the projector.
    pub proj_dim: usize,
    pub kmeans_iters: usize,
}

impl VtBlockConfig {
    pub fn new(c_in: usize, c_out: usize, c_tok: usize, tokens: usize, tokenizer: TokenizerKind) -> Self {
        VtBlockConfig {
            c_in,
            c_out,
            c_tok,
            tokens,
            tokenizer,
            projector: true,
            attn_dim: DEFAULT_ATTN_DIM.min(c_tok),
            proj_dim: (c_out / 2).max(1),
            kmeans_iters: KMEANS_ITERS,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), VtError> {
        let dims = [self.c_in, self.c_out, self.c_tok, self.tokens, self.attn_dim, self.proj_dim];
        if dims.contains(&0) {
            return Err(VtError::Config(format!("VT block dimensions must be positive: {self:?}")));
        }
        if self.tokenizer == TokenizerKind::Pooling && square_side(self.tokens).is_none() {
            return Err(VtError::Config(format!(
                "pooling tokenizer needs a square token count, got {}",
                self.tokens
            )));
        }
        Ok(())
    }

    pub fn has_channel_adapter(&self) -> bool {
        self.c_in != self.c_out
    }

    pub fn has_token_adapter(&self) -> bool {
        self.c_out != self.c_tok
    }

    /// Local parameter names and shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut v = Vec::new();
        if self.has_channel_adapter() {
            v.push(("channel_adapter", vec![self.c_out, self.c_in, 1, 1]));
        }
        match self.tokenizer {
            TokenizerKind::Filter => v.push(("tokenizer.grouping", vec![self.c_out, self.tokens])),
            TokenizerKind::Recurrent => v.push(("tokenizer.token_to_grouping", vec![self.c_tok, self.c_out])),
            TokenizerKind::Pooling | TokenizerKind::Cluster => {}
        }
        if self.has_token_adapter() {
            v.push(("token_adapter", vec![self.c_out, self.c_tok]));
        }
        v.push(("transformer.key", vec![self.c_tok, self.attn_dim]));
        v.push(("transformer.query", vec![self.c_tok, self.attn_dim]));
        v.push(("transformer.ffn_in", vec![self.c_tok, self.c_tok]));
        v.push(("transformer.ffn_out", vec![self.c_tok, self.c_tok]));
        if self.projector {
            v.push(("projector.query", vec![self.c_out, self.proj_dim]));
            v.push(("projector.key", vec![self.c_tok, self.proj_dim]));
            v.push(("projector.value", vec![self.c_tok, self.c_out]));
        }
        v
    }

    pub fn param_count(&self) -> u64 {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
    }

    /// Multiply-accumulates for one sample on an `h x w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let p = (h * w) as u64;
        let (ci, c, ct, l) = (self.c_in as u64, self.c_out as u64, self.c_tok as u64, self.tokens as u64);
        let mut total = 0;
        if self.has_channel_adapter() {
            total += p * ci * c;
        }
        let gather = 2 * p * c * l;
        total += match self.tokenizer {
            TokenizerKind::Filter => gather,
            TokenizerKind::Recurrent => l * ct * c + gather,
            TokenizerKind::Cluster => kmeans_macs(h * w, self.c_out, self.tokens, self.kmeans_iters) + gather,
            TokenizerKind::Pooling => 0,
        };
        if self.has_token_adapter() {
            total += l * c * ct;
        }
        total += transformer_macs(self.tokens, self.c_tok, self.attn_dim);
        if self.projector {
            total += projector_macs(h * w, self.c_out, self.tokens, self.c_tok, self.proj_dim);
        }
        total
    }
}

pub struct VtBlockWeights<'t, T: Scalar> {
    pub channel_adapter: Option<Var<'t, T>>,
    pub grouping: Option<Var<'t, T>>,
    pub token_adapter: Option<Var<'t, T>>,
    pub transformer: TransformerWeights<'t, T>,
    pub projector: Option<ProjectorWeights<'t, T>>,
}

impl<'t, T: Scalar> VtBlockWeights<'t, T> {
    /// Gather weights by local name (see [`VtBlockConfig::param_shapes`]).
    pub fn from_lookup<F>(cfg: &VtBlockConfig, mut get: F) -> Result<Self>
    where
        F: FnMut(&str) -> Result<Var<'t, T>>,
    {
        let channel_adapter = cfg.has_channel_adapter().then(|| get("channel_adapter")).transpose()?;
        let grouping = match cfg.tokenizer {
            TokenizerKind::Filter => Some(get("tokenizer.grouping")?),
            TokenizerKind::Recurrent => Some(get("tokenizer.token_to_grouping")?),
            _ => None,
        };
        let token_adapter = cfg.has_token_adapter().then(|| get("token_adapter")).transpose()?;
        let transformer = TransformerWeights {
            key: get("transformer.key")?,
            query: get("transformer.query")?,
            ffn_in: get("transformer.ffn_in")?,
            ffn_out: get("transformer.ffn_out")?,
        };
        let projector = if cfg.projector {
            Some(ProjectorWeights { query: get("projector.query")?, key: get("projector.key")?, value: get("projector.value")? })
        } else {
            None
        };
        Ok(VtBlockWeights { channel_adapter, grouping, token_adapter, transformer, projector })
    }
}

pub struct VtBlockOutput<'t, T: Scalar> {
    pub features: Var<'t, T>,
    pub tokens: Var<'t, T>,
    /// `[N, HW, L]` spatial attention of the tokenizer, if it has one.
    pub attention: Option<Var<'t, T>>,
}

/// Run one block on `x: [N, c_in, H, W]`. `t_prev` holds the previous
/// block's tokens and is required by the recurrent tokenizer.
pub fn vt_block_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    t_prev: Option<&Var<'t, T>>,
    cfg: &VtBlockConfig,
    w: &VtBlockWeights<'t, T>,
) -> Result<VtBlockOutput<'t, T>> {
    if x.shape().len() != 4 || x.shape()[1] != cfg.c_in {
        return Err(TensorError::shape("vt_block", format!("input {:?} for c_in {}", x.shape(), cfg.c_in)));
    }
    let x = match &w.channel_adapter {
        Some(adapter) => x.conv2d(adapter, 1, 0)?,
        None => x.clone(),
    };
    let missing = || TensorError::invalid("vt_block", format!("{} tokenizer is missing its weights", cfg.tokenizer));
    let tokenized = match cfg.tokenizer {
        TokenizerKind::Filter => filter_tokenize(&x, w.grouping.as_ref().ok_or_else(missing)?)?,
        TokenizerKind::Recurrent => {
            let t_prev = t_prev.ok_or_else(|| {
                TensorError::invalid("vt_block", "recurrent tokenizer needs tokens from a previous block")
            })?;
            recurrent_tokenize(&x, t_prev, w.grouping.as_ref().ok_or_else(missing)?)?
        }
        TokenizerKind::Pooling => pooling_tokenize(&x, cfg.tokens)?,
        TokenizerKind::Cluster => cluster_tokenize(&x, cfg.tokens, cfg.kmeans_iters)?,
    };
    let tokens = match &w.token_adapter {
        Some(adapter) => tokenized.tokens.matmul(adapter)?,
        None => tokenized.tokens,
    };
    let tokens = transformer_forward(&tokens, &w.transformer)?;
    let features = match &w.projector {
        Some(p) => project_tokens(&x, &tokens, p)?.0,
        None => x,
    };
    Ok(VtBlockOutput { features, tokens, attention: tokenized.attention })
}
