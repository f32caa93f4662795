//! Binary checkpoint format.
//!
//! ```text
//! "VTCK" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 dtype (0 = f32) | u8 rank | u32 dims[rank] | f32 data
//! u32 config length | config JSON (UTF-8)
//! ```
//! All integers and scalars are little-endian. Parameters come first in
//! model order, then `<bn>.running_mean` and `<bn>.running_var` for every
//! batch-norm layer.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::VtError;
use crate::model::{ModelConfig, ModelGraph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn named_tensors(model: &ModelGraph<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut v: Vec<(String, &Tensor<f32>)> = model.params().map(|(n, t)| (n.clone(), t)).collect();
    for (name, stats) in model.bn_stats() {
        v.push((format!("{name}.running_mean"), &stats.mean));
        v.push((format!("{name}.running_var"), &stats.var));
    }
    v
}

pub fn encode_checkpoint(model: &ModelGraph<f32>) -> Result<Vec<u8>, VtError> {
    let tensors = named_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| VtError::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg = model.config().to_json();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &ModelGraph<f32>, path: impl AsRef<Path>) -> Result<(), VtError> {
    let bytes = encode_checkpoint(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], VtError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| VtError::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, VtError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, VtError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, VtError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelGraph<f32>, VtError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(VtError::Checkpoint("bad magic, not a VTCK file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(VtError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| VtError::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(VtError::Checkpoint(format!("{name}: unsupported dtype code {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| VtError::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| VtError::Checkpoint(format!("{name}: too large")))?, "data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, shape, data));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| VtError::Checkpoint("config is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(VtError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config = ModelConfig::from_json(cfg_text)?;
    let mut model = ModelGraph::<f32>::zeros(&config)?;
    let expected = named_tensors(&model).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect::<Vec<_>>();
    if expected.len() != tensors.len() {
        return Err(VtError::Checkpoint(format!(
            "config expects {} tensors, file has {}",
            expected.len(),
            tensors.len()
        )));
    }
    for ((want_name, want_shape), (name, shape, data)) in expected.into_iter().zip(tensors) {
        if want_name != name {
            return Err(VtError::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        if want_shape != shape {
            return Err(VtError::Checkpoint(format!("{name}: shape {shape:?} does not match config {want_shape:?}")));
        }
        let t = Tensor::new(shape, data)?;
        if let Some(bn) = name.strip_suffix(".running_mean") {
            model.bn_mut(bn).expect("listed by model").mean = t;
        } else if let Some(bn) = name.strip_suffix(".running_var") {
            model.bn_mut(bn).expect("listed by model").var = t;
        } else {
            model.set_param(&name, t)?;
        }
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph<f32>, VtError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
