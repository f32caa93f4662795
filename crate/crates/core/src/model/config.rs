use serde::{Deserialize, Serialize};

use crate::error::VtError;
use crate::tokenizer::TokenizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    R18,
    R34,
    R50,
    R101,
    /// Reduced network for 64x64 inputs: stages at strides 1/2/4/8 and a
    /// final stage on an 8x8 map.
    Toy,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::R18 => "r18",
            Family::R34 => "r34",
            Family::R50 => "r50",
            Family::R101 => "r101",
            Family::Toy => "toy",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = VtError;

    fn from_str(s: &str) -> Result<Self, VtError> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| VtError::Config(format!("unknown family '{s}' (expected r18, r34, r50, r101 or toy)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Vt,
    Fpn,
}

/// Residual layout of one family at its reference width.
#[derive(Clone, Copy, Debug)]
pub struct FamilyLayout {
    pub bottleneck: bool,
    /// Blocks in stages 2 to 5.
    pub blocks: [usize; 4],
    /// VT blocks replacing stage 5.
    pub vt_blocks: usize,
    /// Default VT feature width as a multiple of the base width.
    pub vt_width_mult: usize,
    pub default_width: usize,
    pub default_input: usize,
}

impl Family {
    pub fn layout(self) -> FamilyLayout {
        let (bottleneck, blocks, vt_blocks, vt_width_mult, default_width, default_input) = match self {
            Family::R18 => (false, [2, 2, 2, 2], 2, 8, 64, 224),
            Family::R34 => (false, [3, 4, 6, 3], 3, 8, 64, 224),
            Family::R50 => (true, [3, 4, 6, 3], 3, 16, 64, 224),
            Family::R101 => (true, [3, 4, 23, 3], 3, 16, 64, 224),
            Family::Toy => (false, [1, 1, 1, 1], 2, 4, 8, 64),
        };
        FamilyLayout { bottleneck, blocks, vt_blocks, vt_width_mult, default_width, default_input }
    }
}

pub const DEFAULT_TOKENS: usize = 16;
pub const DEFAULT_FPN_TOKENS: usize = 8;
pub const DEFAULT_TOKEN_CHANNELS: usize = 1024;
pub const DEFAULT_CLASSES: usize = 1000;
pub const FPN_HEAD_CHANNELS: usize = 128;

fn yes() -> bool {
    true
}

/// JSON model description.
///
/// `tokens` counts tokens per VT block, or per pyramid level for the `fpn`
/// variant. An empty `tokenizers` list selects filter for the first block and
/// recurrent for the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(default = "default_token_channels")]
    pub token_channels: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub tokenizers: Vec<TokenizerKind>,
    #[serde(default = "yes")]
    pub projector: bool,
    /// Base channel width (64 for the reference ResNets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Square input resolution the graph is built for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    /// Feature width inside the VT stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vt_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_dim: Option<usize>,
    /// Backbone stages (2 to 5) tokenized by the `fpn` variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<usize>>,
}

fn default_token_channels() -> usize {
    DEFAULT_TOKEN_CHANNELS
}

fn default_classes() -> usize {
    DEFAULT_CLASSES
}

impl ModelConfig {
    pub fn new(family: Family, variant: Variant) -> Self {
        ModelConfig {
            family,
            variant,
            tokens: None,
            token_channels: DEFAULT_TOKEN_CHANNELS,
            num_classes: DEFAULT_CLASSES,
            tokenizers: Vec::new(),
            projector: true,
            width: None,
            input_size: None,
            vt_channels: None,
            attn_dim: None,
            proj_dim: None,
            levels: None,
        }
    }

    /// The reduced VT network used by the synthetic-shapes harness.
    pub fn toy() -> Self {
        ModelConfig { tokens: Some(8), token_channels: 32, num_classes: 3, ..ModelConfig::new(Family::Toy, Variant::Vt) }
    }

    pub fn from_json(text: &str) -> Result<Self, VtError> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| VtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn tokens(&self) -> usize {
        self.tokens.unwrap_or(if self.variant == Variant::Fpn { DEFAULT_FPN_TOKENS } else { DEFAULT_TOKENS })
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or(self.family.layout().default_width)
    }

    pub fn input_size(&self) -> usize {
        self.input_size.unwrap_or(self.family.layout().default_input)
    }

    pub fn vt_channels(&self) -> usize {
        self.vt_channels.unwrap_or(self.family.layout().vt_width_mult * self.width())
    }

    pub fn levels(&self) -> Vec<usize> {
        self.levels.clone().unwrap_or_else(|| vec![2, 3, 4, 5])
    }

    /// Tokenizer for each VT block.
    pub fn block_tokenizers(&self) -> Vec<TokenizerKind> {
        let n = self.family.layout().vt_blocks;
        if self.tokenizers.is_empty() {
            (0..n).map(|i| if i == 0 { TokenizerKind::Filter } else { TokenizerKind::Recurrent }).collect()
        } else {
            self.tokenizers.clone()
        }
    }

    pub fn validate(&self) -> Result<(), VtError> {
        let bad = |m: String| Err(VtError::Config(m));
        if self.tokens() == 0 || self.token_channels == 0 || self.num_classes == 0 || self.width() == 0 {
            return bad("tokens, token_channels, num_classes and width must be positive".into());
        }
        if self.vt_channels() == 0 || self.attn_dim == Some(0) || self.proj_dim == Some(0) {
            return bad("vt_channels, attn_dim and proj_dim must be positive".into());
        }
        if self.input_size() < 32 {
            return bad(format!("input_size {} is below the network stride of 32", self.input_size()));
        }
        match self.variant {
            Variant::Vt => {
                let kinds = self.block_tokenizers();
                let n = self.family.layout().vt_blocks;
                if kinds.len() != n {
                    return bad(format!("{} has {n} VT blocks but {} tokenizers were given", self.family, kinds.len()));
                }
                if kinds[0] == TokenizerKind::Recurrent {
                    return bad("the first VT block cannot use a recurrent tokenizer".into());
                }
            }
            Variant::Fpn => {
                let levels = self.levels();
                let mut sorted = levels.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if levels.is_empty() || sorted.len() != levels.len() || levels.iter().any(|l| !(2..=5).contains(l)) {
                    return bad(format!("invalid level set {levels:?}: expected distinct stages within 2..=5"));
                }
                if !self.tokenizers.is_empty() {
                    return bad("the fpn variant always uses filter tokenizers".into());
                }
            }
            Variant::Baseline => {
                if !self.tokenizers.is_empty() {
                    return bad("baseline models have no tokenizers".into());
                }
            }
        }
        Ok(())
    }
}
