//! Low-level raster operations: grayscale conversion, Otsu binarization,
//! rectangular morphology and nearest-neighbor resizing.
//!
//! Polarity convention used everywhere in this crate: in a [`BinaryImage`]
//! a value of `0` is black foreground (ink) and `1` is white background.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("data length {actual} does not match {width}x{height}x{channels}")]
    LengthMismatch {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("binary pixel value {0} is neither 0 nor 1")]
    NotBinary(u8),
    #[error("structuring element {kx}x{ky} must have odd positive sides")]
    InvalidKernel { kx: usize, ky: usize },
    #[error("target dimension must be at least 1, got {0}x{1}")]
    ZeroDimension(usize, usize),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("failed to decode image: {0}")]
    Decode(#[from] image::ImageError),
}

/// Row-major image with 1 or 3 channels and intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImagingError> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::UnsupportedChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::LengthMismatch {
                width,
                height,
                channels,
                actual: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::OutOfRange(v));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image filled with a single value in every channel.
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3);
        Self {
            width,
            height,
            channels,
            data: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of pixels (not samples).
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Sets every channel of pixel `idx` (row-major pixel index) to `value`.
    pub fn set_pixel_all(&mut self, idx: usize, value: f32) {
        let c = self.channels;
        self.data[idx * c..(idx + 1) * c].fill(value);
    }

    /// Copies every channel of pixel `idx` from `other`, which must share the
    /// layout of `self`.
    pub fn copy_pixel_from(&mut self, other: &RasterImage, idx: usize) {
        let c = self.channels;
        self.data[idx * c..(idx + 1) * c].copy_from_slice(&other.data[idx * c..(idx + 1) * c]);
    }

    /// Channel mean of pixel `idx`.
    pub fn intensity(&self, idx: usize) -> f32 {
        let c = self.channels;
        if c == 1 {
            self.data[idx]
        } else {
            self.data[idx * c..(idx + 1) * c].iter().sum::<f32>() / c as f32
        }
    }

    /// Replicates or collapses channels to the requested count.
    pub fn with_channels(&self, channels: usize) -> Result<RasterImage, ImagingError> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => to_grayscale(self),
            (1, 3) => Ok(RasterImage {
                width: self.width,
                height: self.height,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            }),
            (_, b) => Err(ImagingError::UnsupportedChannels(b)),
        }
    }

    /// Nearest-neighbor resize, applied per channel.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<RasterImage, ImagingError> {
        let c = self.channels;
        let (xs, ys) = nearest_indices(self.width, self.height, out_w, out_h)?;
        let mut data = Vec::with_capacity(out_w * out_h * c);
        for &sy in &ys {
            for &sx in &xs {
                let i = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Ok(RasterImage {
            width: out_w,
            height: out_h,
            channels: c,
            data,
        })
    }

    /// Pads right and bottom with `fill` to a square of side `max(w, h)`.
    pub fn pad_to_square(&self, fill: f32) -> RasterImage {
        let side = self.width.max(self.height);
        if side == self.width && side == self.height {
            return self.clone();
        }
        let c = self.channels;
        let mut data = vec![fill; side * side * c];
        for y in 0..self.height {
            let src = &self.data[y * self.width * c..(y + 1) * self.width * c];
            data[y * side * c..y * side * c + self.width * c].copy_from_slice(src);
        }
        RasterImage {
            width: side,
            height: side,
            channels: c,
            data,
        }
    }

    /// Decodes PNG or binary PGM/PPM bytes into a single-channel image.
    pub fn decode(bytes: &[u8]) -> Result<RasterImage, ImagingError> {
        let dynamic = image::load_from_memory(bytes)?;
        if !dynamic.color().has_color() {
            let luma = dynamic.to_luma32f();
            let (w, h) = luma.dimensions();
            let data = luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            return RasterImage::new(w as usize, h as usize, 1, data);
        }
        let rgb = dynamic.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        to_grayscale(&RasterImage::new(w as usize, h as usize, 3, data)?)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<RasterImage, ImagingError> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| ImagingError::Decode(image::ImageError::IoError(e)))?;
        Self::decode(&bytes)
    }

    /// 8-bit grayscale PNG encoding of the channel mean.
    pub fn to_png(&self) -> Vec<u8> {
        let gray: Vec<u8> = (0..self.pixel_count())
            .map(|i| (self.intensity(i) * 255.0).round() as u8)
            .collect();
        encode_png_gray(self.width, self.height, &gray)
    }
}

pub(crate) fn encode_png_gray(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(data, width as u32, height as u32, image::ExtendedColorType::L8)
        .expect("in-memory PNG encoding");
    out
}

pub(crate) fn encode_png_rgb(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(data, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

use image::ImageEncoder;

/// Binary raster: `0` = black foreground, `1` = white background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

pub const FOREGROUND: u8 = 0;
pub const BACKGROUND: u8 = 1;

impl BinaryImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if data.len() != width * height {
            return Err(ImagingError::LengthMismatch {
                width,
                height,
                channels: 1,
                actual: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| **v > 1) {
            return Err(ImagingError::NotBinary(v));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![BACKGROUND; width * height],
        }
    }

    /// Builds an image from a foreground predicate over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut is_fg: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(if is_fg(x, y) { FOREGROUND } else { BACKGROUND });
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == FOREGROUND
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == FOREGROUND).count()
    }

    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<BinaryImage, ImagingError> {
        Ok(BinaryImage {
            width: out_w,
            height: out_h,
            data: resize_nearest(&self.data, self.width, self.height, out_w, out_h)?,
        })
    }

    /// Pads right and bottom with background to a square.
    pub fn pad_to_square(&self) -> BinaryImage {
        let side = self.width.max(self.height);
        let mut data = vec![BACKGROUND; side * side];
        for y in 0..self.height {
            data[y * side..y * side + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        BinaryImage {
            width: side,
            height: side,
            data,
        }
    }

    /// As a single-channel raster (0.0 black, 1.0 white).
    pub fn to_raster(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Full rectangular structuring element, `kx` wide and `ky` tall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct StructuringElement {
    kx: usize,
    ky: usize,
}

impl StructuringElement {
    pub fn new(kx: usize, ky: usize) -> Result<Self, ImagingError> {
        if kx == 0 || ky == 0 || kx % 2 == 0 || ky % 2 == 0 {
            return Err(ImagingError::InvalidKernel { kx, ky });
        }
        Ok(Self { kx, ky })
    }

    pub fn square(k: usize) -> Result<Self, ImagingError> {
        Self::new(k, k)
    }

    pub fn kx(&self) -> usize {
        self.kx
    }

    pub fn ky(&self) -> usize {
        self.ky
    }
}

impl TryFrom<[usize; 2]> for StructuringElement {
    type Error = ImagingError;

    fn try_from([kx, ky]: [usize; 2]) -> Result<Self, Self::Error> {
        Self::new(kx, ky)
    }
}

impl From<StructuringElement> for [usize; 2] {
    fn from(se: StructuringElement) -> Self {
        [se.kx, se.ky]
    }
}

impl std::fmt::Display for StructuringElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.kx, self.ky)
    }
}

pub fn to_grayscale(img: &RasterImage) -> Result<RasterImage, ImagingError> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|p| {
                    let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                    y.clamp(0.0, 1.0) as f32
                })
                .collect();
            Ok(RasterImage {
                width: img.width,
                height: img.height,
                channels: 1,
                data,
            })
        }
        c => Err(ImagingError::UnsupportedChannels(c)),
    }
}

/// Histogram bin of an intensity in `[0, 1]` (256 uniform bins).
pub fn histogram_bin(v: f32) -> usize {
    ((v as f64 * 256.0).floor() as usize).min(255)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binarization {
    /// Last histogram bin mapped to foreground; `None` for a degenerate image.
    pub threshold_bin: Option<usize>,
    pub empty_foreground: bool,
}

/// Otsu threshold over a 256-bin histogram. Returns the bin `t` maximizing the
/// between-class variance of `{bins <= t}` vs `{bins > t}`, smallest on ties,
/// or `None` when fewer than two bins are populated.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut n0, mut s0) = (0u64, 0f64);
    let mut best: Option<(usize, f64)> = None;
    for t in 0..255 {
        n0 += hist[t];
        s0 += t as f64 * hist[t] as f64;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total_f, n1 as f64 / total_f);
        let mu0 = s0 / n0 as f64;
        let mu1 = (sum_all - s0) / n1 as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

pub fn otsu_binarize(img: &RasterImage) -> Result<(BinaryImage, Binarization), ImagingError> {
    if img.channels != 1 {
        return Err(ImagingError::UnsupportedChannels(img.channels));
    }
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[histogram_bin(v)] += 1;
    }
    let Some(t) = otsu_threshold(&hist) else {
        return Ok((
            BinaryImage::blank(img.width, img.height),
            Binarization {
                threshold_bin: None,
                empty_foreground: true,
            },
        ));
    };
    let data: Vec<u8> = img
        .data
        .iter()
        .map(|&v| if histogram_bin(v) <= t { FOREGROUND } else { BACKGROUND })
        .collect();
    let empty = !data.contains(&FOREGROUND);
    Ok((
        BinaryImage {
            width: img.width,
            height: img.height,
            data,
        },
        Binarization {
            threshold_bin: Some(t),
            empty_foreground: empty,
        },
    ))
}

/// Whether any (or all) of the `k` samples centered on each position are
/// foreground, along rows (`stride == 1`) or columns (`stride == width`).
/// Out-of-bounds samples count as background.
fn window_pass(ind: &[u8], width: usize, height: usize, k: usize, all: bool, along_rows: bool) -> Vec<u8> {
    let r = k / 2;
    let need = if all { k as u32 } else { 1 };
    let mut out = vec![0u8; ind.len()];
    if along_rows {
        let mut prefix = vec![0u32; width + 1];
        for (row, dst) in ind.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
            for x in 0..width {
                prefix[x + 1] = prefix[x] + row[x] as u32;
            }
            for (x, d) in dst.iter_mut().enumerate() {
                let count = prefix[(x + r + 1).min(width)] - prefix[x.saturating_sub(r)];
                *d = (count >= need) as u8;
            }
        }
    } else {
        // Running column counts of rows [y - r, y + r].
        let mut acc = vec![0u32; width];
        for row in ind.chunks_exact(width).take(r.min(height)) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as u32;
            }
        }
        for y in 0..height {
            if y + r < height {
                for (a, &v) in acc.iter_mut().zip(&ind[(y + r) * width..(y + r + 1) * width]) {
                    *a += v as u32;
                }
            }
            if y > r {
                for (a, &v) in acc.iter_mut().zip(&ind[(y - r - 1) * width..(y - r) * width]) {
                    *a -= v as u32;
                }
            }
            for (d, &a) in out[y * width..(y + 1) * width].iter_mut().zip(&acc) {
                *d = (a >= need) as u8;
            }
        }
    }
    out
}

/// Separable rectangle filter over a 0/1 foreground indicator. "Any" and
/// "all" both factor into a row pass followed by a column pass.
fn rect_filter(ind: &[u8], width: usize, height: usize, se: StructuringElement, all: bool) -> Vec<u8> {
    let rows = window_pass(ind, width, height, se.kx, all, true);
    window_pass(&rows, width, height, se.ky, all, false)
}

impl BinaryImage {
    fn indicator(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v == FOREGROUND) as u8).collect()
    }

    fn from_indicator(width: usize, height: usize, ind: Vec<u8>) -> Self {
        let mut data = ind;
        for v in &mut data {
            *v = if *v == 1 { FOREGROUND } else { BACKGROUND };
        }
        Self { width, height, data }
    }
}

/// Grows the foreground set by the element footprint.
pub fn morph_dilate(img: &BinaryImage, se: StructuringElement) -> BinaryImage {
    let fg = rect_filter(&img.indicator(), img.width, img.height, se, false);
    BinaryImage::from_indicator(img.width, img.height, fg)
}

/// Shrinks the foreground set; a pixel survives only if the whole element fits.
pub fn morph_erode(img: &BinaryImage, se: StructuringElement) -> BinaryImage {
    let fg = rect_filter(&img.indicator(), img.width, img.height, se, true);
    BinaryImage::from_indicator(img.width, img.height, fg)
}

/// Opening of the foreground set (erosion then dilation): removes specks
/// smaller than the element while preserving larger shapes.
pub fn morph_open(img: &BinaryImage, se: StructuringElement) -> BinaryImage {
    let eroded = rect_filter(&img.indicator(), img.width, img.height, se, true);
    let opened = rect_filter(&eroded, img.width, img.height, se, false);
    BinaryImage::from_indicator(img.width, img.height, opened)
}

fn nearest_indices(
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
) -> Result<(Vec<usize>, Vec<usize>), ImagingError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::ZeroDimension(out_w, out_h));
    }
    let xs = (0..out_w).map(|i| i * in_w / out_w).collect();
    let ys = (0..out_h).map(|j| j * in_h / out_h).collect();
    Ok((xs, ys))
}

/// Nearest-neighbor resample of any row-major field; output pixel `(i, j)`
/// reads source `(floor(i * in_w / out_w), floor(j * in_h / out_h))`.
pub fn resize_nearest<T: Copy>(
    data: &[T],
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<T>, ImagingError> {
    let (xs, ys) = nearest_indices(in_w, in_h, out_w, out_h)?;
    let mut out = Vec::with_capacity(out_w * out_h);
    for &sy in &ys {
        let row = &data[sy * in_w..(sy + 1) * in_w];
        out.extend(xs.iter().map(|&sx| row[sx]));
    }
    Ok(out)
}
