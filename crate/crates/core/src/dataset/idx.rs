//! The IDX container used by MNIST and Fashion-MNIST.
//!
//! ```text
//! images: 00 00 08 03 | n: u32 BE | rows: u32 BE | cols: u32 BE | n·rows·cols bytes
//! labels: 00 00 08 01 | n: u32 BE | n bytes
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// How pixel bytes become scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PixelScale {
    /// `u / 255`, so pixels lie in `[0, 1]`.
    #[default]
    Unit,
    /// The byte value itself, in `[0, 255]`.
    Raw,
}

impl PixelScale {
    fn divisor(self) -> f64 {
        match self {
            PixelScale::Unit => 255.0,
            PixelScale::Raw => 1.0,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {}", bytes.len())))
}

fn expect_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!("{what}: magic 0x{magic:08x}, expected 0x{expected:08x}")));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, count: Option<usize>, what: &str) -> Result<&'a [u8]> {
    let count = count.ok_or_else(|| Error::Size(format!("{what}: payload size overflows")))?;
    let body = &bytes[header..];
    if body.len() != count {
        return Err(Error::Length(format!("{what}: header announces {count} payload bytes, found {}", body.len())));
    }
    Ok(body)
}

/// Parses an image file into `[n, rows, cols, 1]` with `u / 255` pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    parse_idx_images_scaled(bytes, PixelScale::Unit)
}

pub fn parse_idx_images_scaled(bytes: &[u8], scale: PixelScale) -> Result<Tensor> {
    const WHAT: &str = "IDX images";
    expect_magic(bytes, IMAGE_MAGIC, WHAT)?;
    let n = read_u32(bytes, 4, WHAT)? as usize;
    let rows = read_u32(bytes, 8, WHAT)? as usize;
    let cols = read_u32(bytes, 12, WHAT)? as usize;
    let count = n.checked_mul(rows).and_then(|v| v.checked_mul(cols));
    let body = payload(bytes, 16, count, WHAT)?;
    let divisor = scale.divisor();
    let data = body.iter().map(|&u| f64::from(u) / divisor).collect();
    Tensor::from_vec(&[n, rows, cols, 1], data)
}

/// Parses a label file; every label must be `< 10`.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const WHAT: &str = "IDX labels";
    expect_magic(bytes, LABEL_MAGIC, WHAT)?;
    let n = read_u32(bytes, 4, WHAT)? as usize;
    let body = payload(bytes, 8, Some(n), WHAT)?;
    body.iter()
        .enumerate()
        .map(|(i, &b)| {
            if b < 10 {
                Ok(usize::from(b))
            } else {
                Err(Error::Format(format!("{WHAT}: label {b} at index {i} is not in 0..10")))
            }
        })
        .collect()
}

/// Serializes `[n, rows, cols, 1]` images back to IDX. Pixels are mapped
/// back through `scale` and rounded to the nearest byte.
pub fn write_idx_images(images: &Tensor, scale: PixelScale) -> Result<Vec<u8>> {
    let (n, rows, cols) = match *images.dims() {
        [n, r, c, 1] => (n, r, c),
        _ => return Err(Error::Shape(format!("IDX images need [n, rows, cols, 1], got {:?}", images.shape()))),
    };
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        let d = u32::try_from(d).map_err(|_| Error::Size(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    let divisor = scale.divisor();
    for &v in images.data() {
        let byte = (v * divisor).round();
        if !(0.0..=255.0).contains(&byte) {
            return Err(Error::Argument(format!("pixel value {v} does not map to a byte")));
        }
        out.push(byte as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let n = u32::try_from(labels.len()).map_err(|_| Error::Size("too many labels".into()))?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l)
            .ok()
            .filter(|&b| b < 10)
            .ok_or_else(|| Error::Argument(format!("label {l} is not in 0..10")))?;
        out.push(b);
    }
    Ok(out)
}
