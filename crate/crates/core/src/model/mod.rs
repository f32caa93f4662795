//! VT-ResNet, baseline ResNet and VT-FPN model graphs.

mod arch;
mod config;
mod forward;
mod graph;

pub use arch::{Architecture, FpnConfig, FpnLevel, Init, Layer, LayerKind, ParamSpec, ShapeFlow, Stage};
pub use config::{
    Family, FamilyLayout, ModelConfig, Variant, DEFAULT_CLASSES, DEFAULT_FPN_TOKENS, DEFAULT_TOKENS,
    DEFAULT_TOKEN_CHANNELS, FPN_HEAD_CHANNELS,
};
pub use forward::{head_classify, AttentionRecord, BnUpdate, ForwardOutput};
pub use graph::ModelGraph;

use crate::error::VtError;
use crate::tensor::Scalar;

/// Build a classification ResNet: standard conv stages 1 to 4 followed by VT
/// blocks (`vt` variant) or the standard conv stage 5 (`baseline`).
pub fn build_vt_resnet<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<T>, VtError> {
    if config.variant == Variant::Fpn {
        return Err(VtError::Config("build_vt_resnet builds classifiers; use build_vt_fpn".into()));
    }
    ModelGraph::build(config, seed)
}

/// Build a VT-FPN segmentation model over `backbone` tokenizing `levels`.
pub fn build_vt_fpn<T: Scalar>(
    backbone: &ModelConfig,
    levels: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph<T>, VtError> {
    let config = ModelConfig {
        variant: Variant::Fpn,
        levels: Some(levels.to_vec()),
        tokens: None,
        num_classes,
        tokenizers: Vec::new(),
        ..backbone.clone()
    };
    ModelGraph::build(&config, seed)
}
