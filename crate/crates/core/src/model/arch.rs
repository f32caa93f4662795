use serde::Serialize;

use super::config::{Family, ModelConfig, Variant, FPN_HEAD_CHANNELS};
use crate::block::VtBlockConfig;
use crate::error::VtError;
use crate::projector::projector_macs;
use crate::tokenizer::TokenizerKind;
use crate::transformer::transformer_macs;

/// Stage label of a layer: the five residual stages or the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Stage {
    Body(u8),
    Head,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Body(1), Stage::Body(2), Stage::Body(3), Stage::Body(4), Stage::Body(5), Stage::Head];
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Body(n) => write!(f, "stage{n}"),
            Stage::Head => f.write_str("head"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with fan-out scaling.
    KaimingOut,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnLevel {
    pub stage: usize,
    pub channels: usize,
    pub proj_dim: usize,
}

/// Token path and segmentation head over several pyramid levels.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnConfig {
    pub levels: Vec<FpnLevel>,
    pub tokens: usize,
    pub c_tok: usize,
    pub attn_dim: usize,
    pub projector: bool,
    pub head_channels: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Conv, BN, ReLU and an optional 3x3/2 max pool.
    Stem { c_out: usize, kernel: usize, stride: usize, max_pool: bool },
    Basic { c_in: usize, c_out: usize, stride: usize },
    Bottleneck { c_in: usize, mid: usize, c_out: usize, stride: usize },
    Vt(VtBlockConfig),
    /// Global average pool and a linear classifier.
    PoolHead { c_in: usize, classes: usize },
    /// Mean over tokens and a linear classifier.
    TokenHead { c_tok: usize, classes: usize },
    Fpn(FpnConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub stage: Stage,
    pub kind: LayerKind,
}

/// Spatial bookkeeping while walking the layers.
#[derive(Clone, Debug, Default)]
pub struct ShapeFlow {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// `(L, Ctok)` of the latest token set.
    pub tokens: Option<(usize, usize)>,
    /// `(C, H, W)` at the end of stages 2 to 5.
    pub pyramid: Vec<(usize, usize, usize)>,
}

pub(crate) fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn conv_spec(name: &str, o: usize, c: usize, k: usize) -> ParamSpec {
    ParamSpec { name: name.into(), shape: vec![o, c, k, k], init: Init::KaimingOut }
}

fn bn_specs(prefix: &str, c: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![c], init: Init::Const(1.0) });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![c], init: Init::Const(0.0) });
}

fn linear_specs(prefix: &str, c_in: usize, c_out: usize, out: &mut Vec<ParamSpec>) {
    let init = Init::Uniform { fan_in: c_in };
    out.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![c_out, c_in], init });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![c_out], init });
}

fn matrix_spec(name: String, shape: Vec<usize>) -> ParamSpec {
    let fan_in = if shape.len() == 4 { shape[1] } else { shape[0] };
    ParamSpec { name, shape, init: Init::Uniform { fan_in } }
}

fn residual_shortcut(c_in: usize, c_out: usize, stride: usize) -> bool {
    stride != 1 || c_in != c_out
}

impl LayerKind {
    /// Parameter names (relative to the layer) and shapes, in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        match self {
            LayerKind::Stem { c_out, kernel, .. } => {
                v.push(conv_spec("conv.weight", *c_out, 3, *kernel));
                bn_specs("bn", *c_out, &mut v);
            }
            LayerKind::Basic { c_in, c_out, stride } => {
                v.push(conv_spec("conv1.weight", *c_out, *c_in, 3));
                bn_specs("bn1", *c_out, &mut v);
                v.push(conv_spec("conv2.weight", *c_out, *c_out, 3));
                bn_specs("bn2", *c_out, &mut v);
                if residual_shortcut(*c_in, *c_out, *stride) {
                    v.push(conv_spec("downsample.conv.weight", *c_out, *c_in, 1));
                    bn_specs("downsample.bn", *c_out, &mut v);
                }
            }
            LayerKind::Bottleneck { c_in, mid, c_out, stride } => {
                v.push(conv_spec("conv1.weight", *mid, *c_in, 1));
                bn_specs("bn1", *mid, &mut v);
                v.push(conv_spec("conv2.weight", *mid, *mid, 3));
                bn_specs("bn2", *mid, &mut v);
                v.push(conv_spec("conv3.weight", *c_out, *mid, 1));
                bn_specs("bn3", *c_out, &mut v);
                if residual_shortcut(*c_in, *c_out, *stride) {
                    v.push(conv_spec("downsample.conv.weight", *c_out, *c_in, 1));
                    bn_specs("downsample.bn", *c_out, &mut v);
                }
            }
            LayerKind::Vt(cfg) => {
                for (name, shape) in cfg.param_shapes() {
                    v.push(matrix_spec(name.to_string(), shape));
                }
            }
            LayerKind::PoolHead { c_in, classes } => linear_specs("fc", *c_in, *classes, &mut v),
            LayerKind::TokenHead { c_tok, classes } => linear_specs("fc", *c_tok, *classes, &mut v),
            LayerKind::Fpn(f) => {
                for lv in &f.levels {
                    let p = format!("p{}", lv.stage);
                    v.push(matrix_spec(format!("{p}.tokenizer.grouping"), vec![lv.channels, f.tokens]));
                    if lv.channels != f.c_tok {
                        v.push(matrix_spec(format!("{p}.token_adapter"), vec![lv.channels, f.c_tok]));
                    }
                }
                for name in ["key", "query"] {
                    v.push(matrix_spec(format!("transformer.{name}"), vec![f.c_tok, f.attn_dim]));
                }
                for name in ["ffn_in", "ffn_out"] {
                    v.push(matrix_spec(format!("transformer.{name}"), vec![f.c_tok, f.c_tok]));
                }
                for lv in &f.levels {
                    let p = format!("p{}", lv.stage);
                    if f.projector {
                        v.push(matrix_spec(format!("{p}.projector.query"), vec![lv.channels, lv.proj_dim]));
                        v.push(matrix_spec(format!("{p}.projector.key"), vec![f.c_tok, lv.proj_dim]));
                        v.push(matrix_spec(format!("{p}.projector.value"), vec![f.c_tok, lv.channels]));
                    }
                    v.push(matrix_spec(format!("{p}.head.weight"), vec![f.head_channels, lv.channels, 1, 1]));
                }
                v.push(matrix_spec("classifier.weight".into(), vec![f.classes, f.head_channels, 1, 1]));
                v.push(ParamSpec {
                    name: "classifier.bias".into(),
                    shape: vec![f.classes],
                    init: Init::Uniform { fan_in: f.head_channels },
                });
            }
        }
        v
    }

    /// Batch-norm layers (relative name, channels).
    pub fn batch_norms(&self) -> Vec<(String, usize)> {
        match self {
            LayerKind::Stem { c_out, .. } => vec![("bn".into(), *c_out)],
            LayerKind::Basic { c_in, c_out, stride } => {
                let mut v = vec![("bn1".into(), *c_out), ("bn2".into(), *c_out)];
                if residual_shortcut(*c_in, *c_out, *stride) {
                    v.push(("downsample.bn".into(), *c_out));
                }
                v
            }
            LayerKind::Bottleneck { c_in, mid, c_out, stride } => {
                let mut v = vec![("bn1".into(), *mid), ("bn2".into(), *mid), ("bn3".into(), *c_out)];
                if residual_shortcut(*c_in, *c_out, *stride) {
                    v.push(("downsample.bn".into(), *c_out));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Multiply-accumulates for one sample; advances `s` to the layer output.
    pub fn macs(&self, s: &mut ShapeFlow) -> Result<u64, VtError> {
        let conv = |c: usize, o: usize, k: usize, oh: usize, ow: usize| (oh * ow * o * c * k * k) as u64;
        let too_small = |what: &str| VtError::Config(format!("{what}: input too small for this network"));
        Ok(match self {
            LayerKind::Stem { c_out, kernel, stride, max_pool } => {
                if s.h < *kernel || s.w < *kernel {
                    return Err(too_small("stem"));
                }
                let (oh, ow) = (out_len(s.h, *kernel, *stride, kernel / 2), out_len(s.w, *kernel, *stride, kernel / 2));
                let m = conv(s.c, *c_out, *kernel, oh, ow);
                (s.c, s.h, s.w) = (*c_out, oh, ow);
                if *max_pool {
                    (s.h, s.w) = (out_len(oh, 3, 2, 1), out_len(ow, 3, 2, 1));
                }
                m
            }
            LayerKind::Basic { c_in, c_out, stride } => {
                let (oh, ow) = (out_len(s.h, 3, *stride, 1), out_len(s.w, 3, *stride, 1));
                let mut m = conv(*c_in, *c_out, 3, oh, ow) + conv(*c_out, *c_out, 3, oh, ow);
                if residual_shortcut(*c_in, *c_out, *stride) {
                    m += conv(*c_in, *c_out, 1, oh, ow);
                }
                (s.c, s.h, s.w) = (*c_out, oh, ow);
                m
            }
            LayerKind::Bottleneck { c_in, mid, c_out, stride } => {
                let (oh, ow) = (out_len(s.h, 3, *stride, 1), out_len(s.w, 3, *stride, 1));
                let mut m = conv(*c_in, *mid, 1, s.h, s.w) + conv(*mid, *mid, 3, oh, ow) + conv(*mid, *c_out, 1, oh, ow);
                if residual_shortcut(*c_in, *c_out, *stride) {
                    m += conv(*c_in, *c_out, 1, oh, ow);
                }
                (s.c, s.h, s.w) = (*c_out, oh, ow);
                m
            }
            LayerKind::Vt(cfg) => {
                if cfg.tokenizer == TokenizerKind::Pooling && s.h * s.w < cfg.tokens {
                    return Err(too_small("pooling tokenizer"));
                }
                s.c = cfg.c_out;
                s.tokens = Some((cfg.tokens, cfg.c_tok));
                cfg.macs(s.h, s.w)
            }
            LayerKind::PoolHead { c_in, classes } => (c_in * classes) as u64,
            LayerKind::TokenHead { c_tok, classes } => (c_tok * classes) as u64,
            LayerKind::Fpn(f) => {
                let (_, h2, w2) = *s.pyramid.first().ok_or_else(|| too_small("fpn"))?;
                let (l, ct) = (f.tokens as u64, f.c_tok as u64);
                let mut m = 0;
                for lv in &f.levels {
                    let (c, h, w) = s.pyramid[lv.stage - 2];
                    let p = (h * w) as u64;
                    m += 2 * p * c as u64 * l;
                    if lv.channels != f.c_tok {
                        m += l * c as u64 * ct;
                    }
                    if f.projector {
                        m += projector_macs(h * w, c, f.tokens, f.c_tok, lv.proj_dim);
                    }
                    m += p * c as u64 * f.head_channels as u64;
                }
                m += transformer_macs(f.levels.len() * f.tokens, f.c_tok, f.attn_dim);
                m += (h2 * w2 * f.head_channels * f.classes) as u64;
                (s.c, s.h, s.w) = (f.classes, h2, w2);
                m
            }
        })
    }
}

/// Layer structure of a model, independent of parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self, VtError> {
        config.validate()?;
        let layout = config.family.layout();
        let w = config.width();
        let mut layers = Vec::new();
        let toy = config.family == Family::Toy;
        layers.push(Layer {
            name: "stage1".into(),
            stage: Stage::Body(1),
            kind: if toy {
                LayerKind::Stem { c_out: w, kernel: 3, stride: 1, max_pool: false }
            } else {
                LayerKind::Stem { c_out: w, kernel: 7, stride: 2, max_pool: true }
            },
        });
        let mut c = w;
        let last_stage = if config.variant == Variant::Vt { 4 } else { 5 };
        for stage in 2..=last_stage {
            let planes = w << (stage - 2);
            let first_stride = if stage == 2 && !toy { 1 } else { 2 };
            for i in 0..layout.blocks[stage - 2] {
                let stride = if i == 0 { first_stride } else { 1 };
                let kind = if layout.bottleneck {
                    LayerKind::Bottleneck { c_in: c, mid: planes, c_out: planes * 4, stride }
                } else {
                    LayerKind::Basic { c_in: c, c_out: planes, stride }
                };
                c = if layout.bottleneck { planes * 4 } else { planes };
                layers.push(Layer { name: format!("stage{stage}.{i}"), stage: Stage::Body(stage as u8), kind });
            }
        }
        match config.variant {
            Variant::Baseline => {
                layers.push(Layer {
                    name: "head".into(),
                    stage: Stage::Head,
                    kind: LayerKind::PoolHead { c_in: c, classes: config.num_classes },
                });
            }
            Variant::Vt => {
                let c_out = config.vt_channels();
                let c_tok = config.token_channels;
                for (i, kind) in config.block_tokenizers().into_iter().enumerate() {
                    let mut block = VtBlockConfig::new(if i == 0 { c } else { c_out }, c_out, c_tok, config.tokens(), kind);
                    block.projector = config.projector;
                    if let Some(d) = config.attn_dim {
                        block.attn_dim = d;
                    }
                    if let Some(d) = config.proj_dim {
                        block.proj_dim = d;
                    }
                    block.validate()?;
                    layers.push(Layer { name: format!("stage5.{i}"), stage: Stage::Body(5), kind: LayerKind::Vt(block) });
                }
                layers.push(Layer {
                    name: "head".into(),
                    stage: Stage::Head,
                    kind: LayerKind::TokenHead { c_tok, classes: config.num_classes },
                });
            }
            Variant::Fpn => {
                let stage_channels = |s: usize| if layout.bottleneck { (w << (s - 2)) * 4 } else { w << (s - 2) };
                let mut levels: Vec<FpnLevel> = config
                    .levels()
                    .into_iter()
                    .map(|s| {
                        let channels = stage_channels(s);
                        FpnLevel { stage: s, channels, proj_dim: config.proj_dim.unwrap_or((channels / 2).max(1)) }
                    })
                    .collect();
                levels.sort_by_key(|l| l.stage);
                let attn_dim = config.attn_dim.unwrap_or(crate::block::DEFAULT_ATTN_DIM.min(config.token_channels));
                layers.push(Layer {
                    name: "fpn".into(),
                    stage: Stage::Head,
                    kind: LayerKind::Fpn(FpnConfig {
                        levels,
                        tokens: config.tokens(),
                        c_tok: config.token_channels,
                        attn_dim,
                        projector: config.projector,
                        head_channels: FPN_HEAD_CHANNELS,
                        classes: config.num_classes,
                    }),
                });
            }
        }
        Ok(Architecture { config: config.clone(), layers })
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size()
    }

    /// Fully qualified parameter specs in registration order.
    pub fn param_specs(&self) -> Vec<(Stage, ParamSpec)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.kind.param_specs().into_iter().map(move |mut p| {
                    p.name = format!("{}.{}", l.name, p.name);
                    (l.stage, p)
                })
            })
            .collect()
    }

    /// Fully qualified batch-norm names and channel counts.
    pub fn batch_norms(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .flat_map(|l| l.kind.batch_norms().into_iter().map(move |(n, c)| (format!("{}.{n}", l.name), c)))
            .collect()
    }

    /// Index of the last layer of each body stage from 2 to 5, if present.
    pub(crate) fn stage_ends(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| {
                let s = self.layers[i].stage;
                matches!(s, Stage::Body(2..=5)) && self.layers.get(i + 1).map(|n| n.stage) != Some(s)
            })
            .collect()
    }
}
