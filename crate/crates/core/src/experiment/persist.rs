//! Binary model files.
//!
//! ```text
//! magic "CNNSVMW\0" | version: u32
//! attribute count: u32, then per attribute: name len u16, name, value u64
//! tensor count: u32, then per tensor: name len u16, name, rank u32,
//!     dims u64 × rank, values f64 × numel
//! ```
//!
//! Integers and floats are little-endian. Floats are stored bit-for-bit, so a
//! loaded model reproduces the saved one exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Padding;
use crate::model::{ArchConfig, ModelParams, ParamSet, PARAM_NAMES};
use crate::objectives::HeadKind;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 8] = *b"CNNSVMW\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: ModelParams,
    /// The head the model was trained with.
    pub head: HeadKind,
}

fn head_code(head: HeadKind) -> u64 {
    match head {
        HeadKind::SoftmaxCe => 0,
        HeadKind::L2Svm => 1,
        HeadKind::L1Svm => 2,
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

pub fn encode_model(model: &ModelParams, head: HeadKind) -> Vec<u8> {
    let a = model.arch();
    let attrs: [(&str, u64); 11] = [
        ("input_extent", a.input_extent as u64),
        ("kernel_size", a.kernel_size as u64),
        ("conv1_filters", a.conv1_filters as u64),
        ("conv2_filters", a.conv2_filters as u64),
        ("hidden_units", a.hidden_units as u64),
        ("classes", a.classes as u64),
        ("pool_size", a.pool_size as u64),
        ("pool_stride", a.pool_stride as u64),
        ("padding", matches!(a.padding, Padding::Valid) as u64),
        ("dropout_p", a.dropout_p.to_bits()),
        ("head", head_code(head)),
    ];
    let params = model.params();
    let mut out = Vec::with_capacity(64 + 8 * model.parameter_count());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(attrs.len() as u32).to_le_bytes());
    for (name, value) in attrs {
        put_name(&mut out, name);
        out.extend_from_slice(&value.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        put_name(&mut out, name);
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Length(format!("model file truncated at byte {}", self.bytes.len())))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("model file: name is not UTF-8".into()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<SavedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }

    let mut arch = ArchConfig::default();
    let mut head = None;
    for _ in 0..r.u32()? {
        let name = r.name()?;
        let value = r.u64()?;
        let size = usize::try_from(value).map_err(|_| Error::Format(format!("attribute {name} out of range")));
        match name.as_str() {
            "input_extent" => arch.input_extent = size?,
            "kernel_size" => arch.kernel_size = size?,
            "conv1_filters" => arch.conv1_filters = size?,
            "conv2_filters" => arch.conv2_filters = size?,
            "hidden_units" => arch.hidden_units = size?,
            "classes" => arch.classes = size?,
            "pool_size" => arch.pool_size = size?,
            "pool_stride" => arch.pool_stride = size?,
            "padding" => arch.padding = if value == 0 { Padding::Same } else { Padding::Valid },
            "dropout_p" => arch.dropout_p = f64::from_bits(value),
            "head" => {
                head = Some(match value {
                    0 => HeadKind::SoftmaxCe,
                    1 => HeadKind::L2Svm,
                    2 => HeadKind::L1Svm,
                    _ => return Err(Error::Format(format!("unknown head code {value}"))),
                })
            }
            // Unknown attributes are skipped.
            _ => {}
        }
    }
    let head = head.ok_or_else(|| Error::Format("model file has no head attribute".into()))?;
    arch.validate()?;

    let count = r.u32()? as usize;
    if count != PARAM_NAMES.len() {
        return Err(Error::Format(format!("model file holds {count} tensors, expected {}", PARAM_NAMES.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let name = r.name()?;
        if name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| Error::Size(format!("{name}: extent {d}")))))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Size(format!("{name}: {dims:?} is too large")))?;
        let raw = r.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::from_vec(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Length(format!("{} trailing bytes after model", bytes.len() - r.pos)));
    }
    Ok(SavedModel { model: ModelParams::from_tensors(arch, tensors)?, head })
}

pub fn save_model(path: &Path, model: &ModelParams, head: HeadKind) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_model(model, head)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
