//! Export of tokenizer attention as per-token heatmaps.

use std::path::{Path, PathBuf};

use log::info;

use crate::error::VtError;
use crate::image::Image;
use crate::model::ModelGraph;
use crate::tensor::{BnMode, Tape, Tensor};

/// Min-max scale to `0..=255`. A constant map has no range to stretch and is
/// written as mid-gray.
pub fn normalize_to_u8(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > f32::EPSILON * hi.abs().max(1.0)) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| (((v - lo) / range) * 255.0).round() as u8).collect()
}

/// Linear blue (low) to red (high) colouring of a scaled map.
pub fn blue_red(gray: &[u8]) -> Vec<u8> {
    gray.iter().flat_map(|&g| [g, 0, 255 - g]).collect()
}

/// One exported heatmap.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub block: usize,
    pub token: usize,
    pub path: PathBuf,
    /// Sum of the attention column before scaling.
    pub column_sum: f64,
}

/// Run `image` through `model` and write `block{k}_token{l}.pgm` for every
/// attention-emitting tokenizer `k` and token `l` (plus `.ppm` colour maps
/// when `colormap` is set). The image is resized to the model input if needed.
pub fn visualize_attention(
    model: &ModelGraph<f32>,
    image: &Image,
    out_dir: impl AsRef<Path>,
    colormap: bool,
) -> Result<Vec<Heatmap>, VtError> {
    if !model.has_attention() {
        return Err(VtError::NoAttention);
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let s = model.input_size();
    let mut input = image.to_tensor();
    if image.width != s || image.height != s {
        input = crate::tensor::ops::upsample_bilinear(&input, s, s)?;
    }
    let tape = Tape::inference();
    let out = model.forward(&tape, &tape.constant(input), BnMode::Eval)?;
    let mut written = Vec::new();
    for (k, rec) in out.attention.iter().enumerate() {
        let a: &Tensor<f32> = rec.map.value();
        let (p, l) = (a.shape()[1], a.shape()[2]);
        for token in 0..l {
            let column: Vec<f32> = (0..p).map(|i| a.data()[i * l + token]).collect();
            let column_sum: f64 = column.iter().map(|&v| v as f64).sum();
            info!("{} token {token}: attention sums to {column_sum:.6}", rec.layer);
            let gray = normalize_to_u8(&column);
            let path = out_dir.join(format!("block{k}_token{token}.pgm"));
            Image::gray(rec.width, rec.height, gray.clone()).write(&path)?;
            if colormap {
                Image::rgb(rec.width, rec.height, blue_red(&gray))
                    .write(out_dir.join(format!("block{k}_token{token}.ppm")))?;
            }
            written.push(Heatmap { block: k, token, path, column_sum });
        }
    }
    Ok(written)
}
