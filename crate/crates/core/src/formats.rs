//! Binary on-disk formats for segmentation masks (`DXSM`) and attribution
//! maps (`DXAM`). All integers and floats are little-endian.
//!
//! ```text
//! DXSM: "DXSM" u32 width, u32 height, u32 n_bg, u32 n_fg, width*height u32 labels
//! DXAM: "DXAM" u32 width, u32 height, u8 kind, u32 target, width*height f32 values
//! ```

use thiserror::Error;

use crate::attribution::{AttributionMap, MapKind};
use crate::segmentation::SegmentationMask;

pub const MASK_MAGIC: &[u8; 4] = b"DXSM";
pub const MAP_MAGIC: &[u8; 4] = b"DXAM";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic, expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated: need {needed} bytes, have {len}")]
    Truncated { needed: usize, len: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("unknown map kind code {0}")]
    UnknownKind(u8),
    #[error("invalid content: {0}")]
    Invalid(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                needed: end,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, magic: &'static [u8; 4]) -> Result<(), FormatError> {
        if self.bytes.get(..4) != Some(&magic[..]) {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(magic).expect("ascii magic"),
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

pub fn encode_mask(mask: &SegmentationMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * mask.labels().len());
    out.extend_from_slice(MASK_MAGIC);
    for v in [mask.width() as u32, mask.height() as u32, mask.n_bg(), mask.n_fg()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in mask.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SegmentationMask, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MASK_MAGIC)?;
    let (w, h, n_bg, n_fg) = (r.u32()? as usize, r.u32()? as usize, r.u32()?, r.u32()?);
    let n = w.checked_mul(h).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| FormatError::Invalid("size overflow".into()))?)?;
    r.finish()?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    SegmentationMask::new(w, h, labels, n_bg, n_fg).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// Values are narrowed to `f32` on export.
pub fn encode_map(map: &AttributionMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 4 * map.values.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.push(map.kind.code());
    out.extend_from_slice(&(map.target_class as u32).to_le_bytes());
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<AttributionMap, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MAP_MAGIC)?;
    let (w, h) = (r.u32()? as usize, r.u32()? as usize);
    let code = r.take(1)?[0];
    let kind = MapKind::from_code(code).ok_or(FormatError::UnknownKind(code))?;
    let target = r.u32()? as usize;
    let n = w.checked_mul(h).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| FormatError::Invalid("size overflow".into()))?)?;
    r.finish()?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Invalid("non-finite attribution value".into()));
    }
    Ok(AttributionMap {
        width: w,
        height: h,
        values,
        kind,
        target_class: target,
    })
}
