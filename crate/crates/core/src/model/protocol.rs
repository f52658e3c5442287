//! Binary scoring protocol spoken with external model processes.
//!
//! Request (engine → child stdin), all integers u32 little-endian:
//!
//! ```text
//! "DXP1" | batch | height | width | channels | batch*height*width*channels f32 LE
//! ```
//!
//! Reply (child stdout → engine):
//!
//! ```text
//! "DXR1" | batch | n_classes | batch*n_classes f32 LE
//! ```
//!
//! One request is in flight at a time; the child exits when stdin closes.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::imaging::RasterImage;

pub const REQUEST_MAGIC: [u8; 4] = *b"DXP1";
pub const REPLY_MAGIC: [u8; 4] = *b"DXR1";

#[derive(Debug, Error)]
#[error("protocol violation at byte {offset}: {message}")]
pub struct ProtocolError {
    /// Offset from the start of the offending message.
    pub offset: u64,
    pub message: String,
}

impl ProtocolError {
    fn new(offset: u64, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

/// Decoded request: a batch of equally shaped HWC images.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub batch: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl ScoreRequest {
    pub fn image(&self, i: usize) -> &[f32] {
        let n = (self.height * self.width * self.channels) as usize;
        &self.data[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReply {
    pub batch: u32,
    pub n_classes: u32,
    pub scores: Vec<f32>,
}

impl ScoreReply {
    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.n_classes as usize;
        &self.scores[i * n..(i + 1) * n]
    }
}

/// Reader that tracks how many bytes of the current message were consumed.
struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), ProtocolError> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(ProtocolError::new(
                        self.offset + filled as u64,
                        format!("unexpected end of stream while reading {what}"),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(ProtocolError::new(
                        self.offset + filled as u64,
                        format!("read error in {what}: {e}"),
                    ))
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32, ProtocolError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, ProtocolError> {
        let mut bytes = vec![0u8; n * 4];
        self.exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_request<W: Write>(w: &mut W, images: &[RasterImage]) -> io::Result<()> {
    let (h, wd, c) = images
        .first()
        .map_or((0, 0, 0), |i| (i.height(), i.width(), i.channels()));
    let mut buf = Vec::with_capacity(20 + images.len() * h * wd * c * 4);
    buf.extend_from_slice(&REQUEST_MAGIC);
    for v in [images.len(), h, wd, c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        assert_eq!((img.height(), img.width(), img.channels()), (h, wd, c));
        for v in img.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one request; `Ok(None)` on a clean end of stream before any byte.
pub fn read_request<R: Read>(r: &mut R) -> Result<Option<ScoreRequest>, ProtocolError> {
    let mut first = [0u8; 1];
    loop {
        match r.read(&mut first) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ProtocolError::new(0, format!("read error: {e}"))),
        }
    }
    let mut reader = Counting {
        inner: r,
        offset: 1,
    };
    let mut rest = [0u8; 3];
    reader.exact(&mut rest, "request magic")?;
    let magic = [first[0], rest[0], rest[1], rest[2]];
    if magic != REQUEST_MAGIC {
        return Err(ProtocolError::new(0, format!("bad request magic {magic:?}")));
    }
    let batch = reader.u32("batch")?;
    let height = reader.u32("height")?;
    let width = reader.u32("width")?;
    let channels = reader.u32("channels")?;
    let n = batch as u64 * height as u64 * width as u64 * channels as u64;
    if n > MAX_ELEMENTS {
        return Err(ProtocolError::new(4, format!("request of {n} values is too large")));
    }
    let data = reader.f32s(n as usize, "pixel data")?;
    Ok(Some(ScoreRequest {
        batch,
        height,
        width,
        channels,
        data,
    }))
}

pub fn write_reply<W: Write>(w: &mut W, n_classes: usize, scores: &[Vec<f32>]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(12 + scores.len() * n_classes * 4);
    buf.extend_from_slice(&REPLY_MAGIC);
    buf.extend_from_slice(&(scores.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n_classes as u32).to_le_bytes());
    for row in scores {
        assert_eq!(row.len(), n_classes);
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one reply, checking it answers a request of `expected_batch` images.
pub fn read_reply<R: Read>(r: &mut R, expected_batch: u32) -> Result<ScoreReply, ProtocolError> {
    let mut reader = Counting { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    reader.exact(&mut magic, "reply magic")?;
    if magic != REPLY_MAGIC {
        return Err(ProtocolError::new(0, format!("bad reply magic {magic:?}")));
    }
    let batch = reader.u32("batch")?;
    if batch != expected_batch {
        return Err(ProtocolError::new(
            4,
            format!("reply batch {batch} does not match request batch {expected_batch}"),
        ));
    }
    let n_classes = reader.u32("n_classes")?;
    let n = batch as u64 * n_classes as u64;
    if n > MAX_ELEMENTS {
        return Err(ProtocolError::new(8, format!("reply of {n} values is too large")));
    }
    let start = reader.offset;
    let scores = reader.f32s(n as usize, "scores")?;
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(ProtocolError::new(
            start + 4 * i as u64,
            "non-finite score value",
        ));
    }
    Ok(ScoreReply {
        batch,
        n_classes,
        scores,
    })
}
