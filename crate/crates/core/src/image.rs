//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::path::Path;

use crate::error::VtError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Image { width, height, channels: 1, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Image { width, height, channels: 3, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, VtError> {
        let bad = |m: &str| VtError::Image(m.to_string());
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(bad("incomplete header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(VtError::Image(format!("unsupported format {other}; expected P5 or P6"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| VtError::Image(format!("bad header number '{s}'")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if width == 0 || height == 0 {
            return Err(bad("empty image"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(VtError::Image(format!("maxval {maxval} not supported (1..=255)")));
        }
        let n = width * height * channels;
        let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("raster shorter than header claims"))?;
        let data = if maxval == 255 {
            raster.to_vec()
        } else {
            raster.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8).collect()
        };
        Ok(Image { width, height, channels, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, VtError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| VtError::Image(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), VtError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    /// `[1, 3, H, W]` in `[0, 1]`; gray images are replicated across channels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            let ch = if self.channels == 1 { 0 } else { c };
            self.data[p * self.channels + ch] as f32 / 255.0
        })
    }

    /// Inverse of [`Image::to_tensor`] for a `[3, H, W]` or `[1, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, VtError> {
        let (h, w) = match *t.shape() {
            [3, h, w] | [1, 3, h, w] => (h, w),
            _ => return Err(VtError::Image(format!("expected a 3-channel image tensor, got {:?}", t.shape()))),
        };
        let plane = h * w;
        let data = (0..plane * 3)
            .map(|i| {
                let (p, c) = (i / 3, i % 3);
                (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        Ok(Image::rgb(w, h, data))
    }
}
