use super::arch::{FpnConfig, LayerKind};
use super::graph::ModelGraph;
use crate::block::{vt_block_forward, VtBlockWeights};
use crate::error::{Result, TensorError};
use crate::projector::{project_tokens, ProjectorWeights};
use crate::tensor::{BnMode, PoolMode, Scalar, Tape, Tensor, Var};
use crate::tokenizer::filter_tokenize;
use crate::transformer::{transformer_forward, TransformerWeights};

/// Spatial attention of one tokenizer, `[N, H*W, L]`.
pub struct AttentionRecord<'t, T: Scalar> {
    pub layer: String,
    pub map: Var<'t, T>,
    pub height: usize,
    pub width: usize,
}

/// Batch statistics observed by one batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct ForwardOutput<'t, T: Scalar> {
    /// `[N, classes]` for classifiers, `[N, classes, H/4, W/4]` for segmentation.
    pub logits: Var<'t, T>,
    /// Final token set (VT stage output, or the merged pyramid tokens).
    pub tokens: Option<Var<'t, T>>,
    pub attention: Vec<AttentionRecord<'t, T>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

struct Ctx<'m, 't, T: Scalar> {
    model: &'m ModelGraph<T>,
    tape: &'t Tape<T>,
    mode: BnMode,
    bn_updates: Vec<BnUpdate<T>>,
    attention: Vec<AttentionRecord<'t, T>>,
}

impl<'m, 't, T: Scalar> Ctx<'m, 't, T> {
    fn p(&self, name: &str) -> Result<Var<'t, T>> {
        Ok(self.tape.param_shared(name, self.model.param_arc(name)?))
    }

    fn bn(&mut self, name: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = self.p(&format!("{name}.weight"))?;
        let beta = self.p(&format!("{name}.bias"))?;
        let stats = self.model.bn(name).ok_or_else(|| TensorError::ParamNotOnTape(format!("{name} running stats")))?;
        let (y, batch) = x.batch_norm(&gamma, &beta, stats, self.mode)?;
        if let Some((mean, var)) = batch {
            self.bn_updates.push(BnUpdate { name: name.to_string(), mean, var });
        }
        Ok(y)
    }

    fn conv_bn(&mut self, prefix: &str, conv: &str, bn: &str, x: &Var<'t, T>, stride: usize, relu: bool) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{prefix}.{conv}.weight"))?;
        let pad = w.shape()[2] / 2;
        let y = self.bn(&format!("{prefix}.{bn}"), &x.conv2d(&w, stride, pad)?)?;
        Ok(if relu { y.relu() } else { y })
    }

    fn shortcut(&mut self, prefix: &str, x: &Var<'t, T>, c_in: usize, c_out: usize, stride: usize) -> Result<Var<'t, T>> {
        if stride != 1 || c_in != c_out {
            self.conv_bn(prefix, "downsample.conv", "downsample.bn", x, stride, false)
        } else {
            Ok(x.clone())
        }
    }

    fn linear(&self, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        x.matmul_t(false, &w, true)?.add_bias(&b, 1)
    }

    fn fpn(&mut self, f: &FpnConfig, pyramid: &[Var<'t, T>]) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let base = pyramid.first().ok_or_else(|| TensorError::invalid("fpn", "no pyramid levels"))?;
        let (h2, w2) = (base.shape()[2], base.shape()[3]);
        let mut token_sets = Vec::new();
        for lv in &f.levels {
            let map = &pyramid[lv.stage - 2];
            let tk = filter_tokenize(map, &self.p(&format!("fpn.p{}.tokenizer.grouping", lv.stage))?)?;
            if let Some(a) = tk.attention {
                self.attention.push(AttentionRecord {
                    layer: format!("fpn.p{}", lv.stage),
                    map: a,
                    height: map.shape()[2],
                    width: map.shape()[3],
                });
            }
            token_sets.push(if lv.channels != f.c_tok {
                tk.tokens.matmul(&self.p(&format!("fpn.p{}.token_adapter", lv.stage))?)?
            } else {
                tk.tokens
            });
        }
        let weights = TransformerWeights {
            key: self.p("fpn.transformer.key")?,
            query: self.p("fpn.transformer.query")?,
            ffn_in: self.p("fpn.transformer.ffn_in")?,
            ffn_out: self.p("fpn.transformer.ffn_out")?,
        };
        let merged = transformer_forward(&Var::concat1(&token_sets)?, &weights)?;
        let mut fused: Option<Var<'t, T>> = None;
        for (i, lv) in f.levels.iter().enumerate() {
            let p = format!("fpn.p{}", lv.stage);
            let map = &pyramid[lv.stage - 2];
            let map = if f.projector {
                let w = ProjectorWeights {
                    query: self.p(&format!("{p}.projector.query"))?,
                    key: self.p(&format!("{p}.projector.key"))?,
                    value: self.p(&format!("{p}.projector.value"))?,
                };
                project_tokens(map, &merged.narrow1(i * f.tokens, f.tokens)?, &w)?.0
            } else {
                map.clone()
            };
            let mut y = map.conv2d(&self.p(&format!("{p}.head.weight"))?, 1, 0)?;
            if (y.shape()[2], y.shape()[3]) != (h2, w2) {
                y = y.upsample_bilinear(h2, w2)?;
            }
            fused = Some(match fused {
                Some(acc) => acc.add(&y)?,
                None => y,
            });
        }
        let fused = fused.ok_or_else(|| TensorError::invalid("fpn", "empty level set"))?;
        let logits = fused.conv2d(&self.p("fpn.classifier.weight")?, 1, 0)?.add_bias(&self.p("fpn.classifier.bias")?, 1)?;
        Ok((logits, merged))
    }
}

/// Mean over tokens followed by a linear classifier.
pub fn head_classify<'t, T: Scalar>(tokens: &Var<'t, T>, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
    tokens.mean_axis(1)?.matmul_t(false, weight, true)?.add_bias(bias, 1)
}

impl<T: Scalar> ModelGraph<T> {
    /// Run the model on `input: [N, 3, S, S]` where `S` is the configured
    /// input size. Train mode normalises with batch statistics and reports
    /// them in [`ForwardOutput::bn_updates`]; apply them with
    /// [`ModelGraph::apply_bn_updates`].
    pub fn forward<'t>(&self, tape: &'t Tape<T>, input: &Var<'t, T>, mode: BnMode) -> Result<ForwardOutput<'t, T>> {
        let s = self.input_size();
        match *input.shape() {
            [_, 3, h, w] if h == s && w == s => {}
            _ => {
                return Err(TensorError::shape("forward", format!("expected [N, 3, {s}, {s}], got {:?}", input.shape())));
            }
        }
        let mut cx = Ctx { model: self, tape, mode, bn_updates: Vec::new(), attention: Vec::new() };
        let ends = self.architecture().stage_ends();
        let mut x = input.clone();
        let mut tokens: Option<Var<'t, T>> = None;
        let mut pyramid = Vec::new();
        let mut logits = None;
        for (i, layer) in self.layers().iter().enumerate() {
            let name = layer.name.as_str();
            match &layer.kind {
                LayerKind::Stem { stride, max_pool, .. } => {
                    x = cx.conv_bn(name, "conv", "bn", &x, *stride, true)?;
                    if *max_pool {
                        x = x.pool2d(PoolMode::Max { k: 3, stride: 2, pad: 1 })?;
                    }
                }
                LayerKind::Basic { c_in, c_out, stride } => {
                    let y = cx.conv_bn(name, "conv1", "bn1", &x, *stride, true)?;
                    let y = cx.conv_bn(name, "conv2", "bn2", &y, 1, false)?;
                    x = y.add(&cx.shortcut(name, &x, *c_in, *c_out, *stride)?)?.relu();
                }
                LayerKind::Bottleneck { c_in, c_out, stride, .. } => {
                    let y = cx.conv_bn(name, "conv1", "bn1", &x, 1, true)?;
                    let y = cx.conv_bn(name, "conv2", "bn2", &y, *stride, true)?;
                    let y = cx.conv_bn(name, "conv3", "bn3", &y, 1, false)?;
                    x = y.add(&cx.shortcut(name, &x, *c_in, *c_out, *stride)?)?.relu();
                }
                LayerKind::Vt(cfg) => {
                    let w = VtBlockWeights::from_lookup(cfg, |local| cx.p(&format!("{name}.{local}")))?;
                    let out = vt_block_forward(&x, tokens.as_ref(), cfg, &w)?;
                    if let Some(a) = out.attention {
                        cx.attention.push(AttentionRecord {
                            layer: name.to_string(),
                            map: a,
                            height: x.shape()[2],
                            width: x.shape()[3],
                        });
                    }
                    x = out.features;
                    tokens = Some(out.tokens);
                }
                LayerKind::PoolHead { .. } => {
                    let [n, c, h, w] = *x.shape() else { unreachable!("conv features are NCHW") };
                    let pooled = x.reshape(&[n, c, h * w])?.mean_axis(2)?;
                    logits = Some(cx.linear(&format!("{name}.fc"), &pooled)?);
                }
                LayerKind::TokenHead { .. } => {
                    let t = tokens.as_ref().ok_or_else(|| TensorError::invalid("head", "no tokens reach the head"))?;
                    let w = cx.p(&format!("{name}.fc.weight"))?;
                    let b = cx.p(&format!("{name}.fc.bias"))?;
                    logits = Some(head_classify(t, &w, &b)?);
                }
                LayerKind::Fpn(f) => {
                    let (l, merged) = cx.fpn(f, &pyramid)?;
                    logits = Some(l);
                    tokens = Some(merged);
                }
            }
            if ends.contains(&i) {
                pyramid.push(x.clone());
            }
        }
        let logits = logits.ok_or_else(|| TensorError::invalid("forward", "model has no head"))?;
        Ok(ForwardOutput { logits, tokens, attention: cx.attention, bn_updates: cx.bn_updates })
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let x = tape.constant(input.clone());
        Ok(self.forward(&tape, &x, BnMode::Eval)?.logits.value().clone())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            if let Some(stats) = self.bn_mut(&u.name) {
                stats.update(&u.mean, &u.var);
            }
        }
    }
}
