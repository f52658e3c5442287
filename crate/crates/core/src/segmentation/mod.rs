//! Structure-aware document segmentation.
//!
//! Every mask partitions the page into `n_bg` background grid cells (labels
//! `1..=n_bg`) and `n_fg` foreground groups (labels `n_bg+1..=n_bg+n_fg`).
//! Foreground groups are connected components of the dilated ink, so the
//! choice of dilation kernel controls granularity: small square kernels give
//! word-level groups, wide kernels merge text lines, tall kernels merge blocks.

mod slic;

pub use slic::slic_region;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    morph_dilate, morph_open, otsu_binarize, resize_nearest, to_grayscale, BinaryImage,
    Binarization, ImagingError, RasterImage, StructuringElement,
};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("background patch {px}x{py} does not fit a {width}x{height} image")]
    PatchTooLarge {
        px: usize,
        py: usize,
        width: usize,
        height: usize,
    },
    #[error("background patch {px}x{py} does not evenly divide a {width}x{height} image")]
    PatchNotDivisor {
        px: usize,
        py: usize,
        width: usize,
        height: usize,
    },
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("at least one kernel configuration is required")]
    NoKernels,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

/// Per-pixel group labels covering the whole page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    n_bg: u32,
    n_fg: u32,
}

impl SegmentationMask {
    /// Validates the partition invariants: every label lies in
    /// `1..=n_bg+n_fg` and every foreground label occupies at least one pixel.
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u32>,
        n_bg: u32,
        n_fg: u32,
    ) -> Result<Self, SegmentationError> {
        if labels.len() != width * height {
            return Err(SegmentationError::InvalidMask(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        let total = n_bg + n_fg;
        let mut seen = vec![false; total as usize + 1];
        for &l in &labels {
            if l == 0 || l > total {
                return Err(SegmentationError::InvalidMask(format!(
                    "label {l} outside 1..={total}"
                )));
            }
            seen[l as usize] = true;
        }
        if let Some(l) = (n_bg + 1..=total).find(|&l| !seen[l as usize]) {
            return Err(SegmentationError::InvalidMask(format!(
                "foreground label {l} has no pixels"
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
            n_bg,
            n_fg,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_bg(&self) -> u32 {
        self.n_bg
    }

    pub fn n_fg(&self) -> u32 {
        self.n_fg
    }

    pub fn n_groups(&self) -> u32 {
        self.n_bg + self.n_fg
    }

    pub fn is_foreground_label(&self, label: u32) -> bool {
        label > self.n_bg
    }

    /// Pixel count per label; index 0 is unused.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.n_groups() as usize + 1];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    /// Row-major pixel indices per label; index 0 is unused.
    pub fn group_pixels(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_groups() as usize + 1];
        for (p, &l) in self.labels.iter().enumerate() {
            groups[l as usize].push(p);
        }
        groups
    }

    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<Self, ImagingError> {
        Ok(Self {
            width: out_w,
            height: out_h,
            labels: resize_nearest(&self.labels, self.width, self.height, out_w, out_h)?,
            n_bg: self.n_bg,
            n_fg: self.n_fg,
        })
    }
}

/// Connected-component labels of the dilated foreground; `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    /// Components covering at least this fraction of the model-resolution
    /// image are split into superpixels.
    pub area_fraction_trigger: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 50,
            compactness: 10.0,
            area_fraction_trigger: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub fg_kernel: StructuringElement,
    #[serde(default = "default_bg_patch")]
    pub bg_patch: [usize; 2],
    /// Foreground label growth in pixels at working resolution.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Foreground groups smaller than this (model resolution) are dissolved.
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default)]
    pub slic: SlicParams,
}

fn default_bg_patch() -> [usize; 2] {
    [64, 64]
}

fn default_expansion() -> usize {
    2
}

fn default_min_area() -> usize {
    4
}

impl KernelConfig {
    pub fn with_kernel(kx: usize, ky: usize) -> Result<Self, ImagingError> {
        Ok(Self {
            fg_kernel: StructuringElement::new(kx, ky)?,
            bg_patch: default_bg_patch(),
            expansion: default_expansion(),
            min_area: default_min_area(),
            slic: SlicParams::default(),
        })
    }

    /// Word-level (5x5), block-level (3x15) and line-level (15x3) kernels.
    pub fn defaults() -> Vec<KernelConfig> {
        [(5, 5), (3, 15), (15, 3)]
            .into_iter()
            .map(|(kx, ky)| Self::with_kernel(kx, ky).expect("odd kernel"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side of the square working raster used for binarization and morphology.
    pub working_size: usize,
    pub open_kernel: StructuringElement,
    pub kernels: Vec<KernelConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            working_size: 1024,
            open_kernel: StructuringElement::square(5).expect("odd kernel"),
            kernels: KernelConfig::defaults(),
        }
    }
}

/// Row-major background grid with `(W / P_bx) * (H / P_by)` cells.
pub fn segment_background(
    width: usize,
    height: usize,
    patch: [usize; 2],
) -> Result<SegmentationMask, SegmentationError> {
    let [px, py] = patch;
    if px == 0 || py == 0 || px > width || py > height {
        return Err(SegmentationError::PatchTooLarge {
            px,
            py,
            width,
            height,
        });
    }
    if width % px != 0 || height % py != 0 {
        return Err(SegmentationError::PatchNotDivisor {
            px,
            py,
            width,
            height,
        });
    }
    let cols = width / px;
    let rows = height / py;
    let template: Vec<u32> = (0..width).map(|x| (x / px + 1) as u32).collect();
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let row_base = ((y / py) * cols) as u32;
        labels.extend(template.iter().map(|&t| t + row_base));
    }
    Ok(SegmentationMask {
        width,
        height,
        labels,
        n_bg: (cols * rows) as u32,
        n_fg: 0,
    })
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let next = parent[parent[x as usize] as usize];
        parent[x as usize] = next;
        x = next;
    }
    x
}

/// 8-connected components of `img`'s foreground, numbered from 1 in raster
/// discovery order.
pub fn connected_components(img: &BinaryImage) -> ComponentLabels {
    let (w, h) = (img.width(), img.height());
    let data = img.data();
    // Horizontal runs `(row, start, end)`, end exclusive, in raster order.
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    let mut parent: Vec<u32> = Vec::new();
    let mut prev = 0..0;
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let first = runs.len();
        let mut x = 0;
        while x < w {
            if row[x] != crate::imaging::FOREGROUND {
                x += 1;
                continue;
            }
            let x0 = x;
            while x < w && row[x] == crate::imaging::FOREGROUND {
                x += 1;
            }
            let id = runs.len() as u32;
            runs.push((y, x0, x));
            parent.push(id);
            // Runs of the previous row touching [x0 - 1, x] are 8-adjacent.
            for j in prev.clone() {
                let (_, p0, p1) = runs[j];
                if p0 > x {
                    break;
                }
                if p1 >= x0 {
                    let (a, b) = (find(&mut parent, id), find(&mut parent, j as u32));
                    if a != b {
                        parent[a.max(b) as usize] = a.min(b);
                    }
                }
            }
        }
        prev = first..runs.len();
    }
    let mut labels = vec![0u32; w * h];
    let mut component = vec![0u32; runs.len()];
    let mut count = 0u32;
    for (i, &(y, x0, x1)) in runs.iter().enumerate() {
        let root = find(&mut parent, i as u32) as usize;
        if component[root] == 0 {
            count += 1;
            component[root] = count;
        }
        labels[y * w + x0..y * w + x1].fill(component[root]);
    }
    ComponentLabels {
        width: w,
        height: h,
        labels,
        count,
    }
}

/// Dilates the ink with `fg_kernel` and labels the resulting blobs.
pub fn segment_foreground(img: &BinaryImage, fg_kernel: StructuringElement) -> ComponentLabels {
    connected_components(&morph_dilate(img, fg_kernel))
}

/// Merges a background grid with foreground components: foreground labels
/// are offset by `n_bg`, remaining pixels keep their grid cell.
pub fn combine_masks(
    bg: &SegmentationMask,
    fg: &ComponentLabels,
) -> Result<SegmentationMask, SegmentationError> {
    if (bg.width, bg.height) != (fg.width, fg.height) {
        return Err(SegmentationError::DimensionMismatch(
            (bg.width, bg.height),
            (fg.width, fg.height),
        ));
    }
    let labels = bg
        .labels
        .iter()
        .zip(&fg.labels)
        .map(|(&b, &f)| if f == 0 { b } else { f + bg.n_bg })
        .collect();
    Ok(SegmentationMask {
        width: bg.width,
        height: bg.height,
        labels,
        n_bg: bg.n_bg,
        n_fg: bg.n_fg + fg.count,
    })
}

/// Grows every foreground region by `steps` pixels (3x3 per step) into
/// background-labeled pixels only. Where regions compete, the lower label wins.
pub fn expand_labels(mask: &SegmentationMask, steps: usize) -> SegmentationMask {
    let (w, h) = (mask.width, mask.height);
    let n_bg = mask.n_bg;
    let mut current = mask.labels.clone();
    for _ in 0..steps {
        let mut next = current.clone();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if current[p] > n_bg {
                    continue;
                }
                let mut best = u32::MAX;
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let l = current[ny * w + nx];
                        if l > n_bg && l < best {
                            best = l;
                        }
                    }
                }
                if best != u32::MAX {
                    next[p] = best;
                    changed = true;
                }
            }
        }
        current = next;
        if !changed {
            break;
        }
    }
    SegmentationMask {
        labels: current,
        ..mask.clone()
    }
}

/// `expand_labels(mask, steps)` followed by a nearest resize, evaluated only
/// at the sampled source pixels. A background pixel whose Chebyshev distance
/// `d` to the foreground is at most `steps` takes the smallest foreground label
/// at distance exactly `d`.
pub fn expand_and_resize(
    mask: &SegmentationMask,
    steps: usize,
    out_w: usize,
    out_h: usize,
) -> Result<SegmentationMask, ImagingError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::ZeroDimension(out_w, out_h));
    }
    let (w, h) = (mask.width, mask.height);
    let n_bg = mask.n_bg;
    let src = &mask.labels;
    let ring_min = |x: usize, y: usize, d: usize| -> Option<u32> {
        let (x0, x1) = (x.saturating_sub(d), (x + d).min(w - 1));
        let (y0, y1) = (y.saturating_sub(d), (y + d).min(h - 1));
        let mut best = None::<u32>;
        for ny in y0..=y1 {
            let on_edge_row = ny + d == y || ny == y + d;
            for nx in x0..=x1 {
                if !on_edge_row && nx + d != x && nx != x + d {
                    continue;
                }
                let l = src[ny * w + nx];
                if l > n_bg && best.is_none_or(|b| l < b) {
                    best = Some(l);
                }
            }
        }
        best
    };
    let mut labels = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let y = j * h / out_h;
        for i in 0..out_w {
            let x = i * w / out_w;
            let l = src[y * w + x];
            let label = if l > n_bg {
                l
            } else {
                (1..=steps).find_map(|d| ring_min(x, y, d)).unwrap_or(l)
            };
            labels.push(label);
        }
    }
    Ok(SegmentationMask {
        width: out_w,
        height: out_h,
        labels,
        n_bg,
        n_fg: mask.n_fg,
    })
}

/// Splits foreground groups covering at least `trigger * w * h` pixels into
/// SLIC superpixels over `gray`. New groups get fresh labels above the
/// current maximum; the returned mask is not compacted.
fn split_large_groups(
    labels: &mut [u32],
    width: usize,
    n_bg: u32,
    n_total: &mut u32,
    gray: &[f32],
    slic: &SlicParams,
) {
    let pixel_count = labels.len();
    let threshold = (slic.area_fraction_trigger * pixel_count as f64).ceil().max(2.0) as usize;
    let mut groups = vec![Vec::new(); *n_total as usize + 1];
    for (p, &l) in labels.iter().enumerate() {
        if l > n_bg {
            groups[l as usize].push(p);
        }
    }
    for region in groups.iter().filter(|g| g.len() >= threshold) {
        let ids = slic_region(gray, width, region, slic.n_segments, slic.compactness);
        let k = ids.iter().copied().max().map_or(0, |m| m + 1);
        if k <= 1 {
            continue;
        }
        let base = *n_total;
        for (&p, &id) in region.iter().zip(&ids) {
            labels[p] = base + 1 + id;
        }
        *n_total += k;
    }
}

/// Replaces every foreground group smaller than `min_area` by the most
/// frequent background label among the nearest surrounding background pixels
/// (4-neighborhood rings, ties to the smaller label).
fn dissolve_small_groups(labels: &mut [u32], width: usize, n_bg: u32, n_total: u32, min_area: usize) {
    if min_area == 0 {
        return;
    }
    let height = labels.len() / width;
    let mut groups = vec![Vec::new(); n_total as usize + 1];
    for (p, &l) in labels.iter().enumerate() {
        if l > n_bg {
            groups[l as usize].push(p);
        }
    }
    let mut visited = vec![0u32; labels.len()];
    let mut stamp = 0u32;
    for (label, pixels) in groups.iter().enumerate() {
        if pixels.is_empty() || pixels.len() >= min_area {
            continue;
        }
        stamp += 1;
        for &p in pixels {
            visited[p] = stamp;
        }
        let mut frontier = pixels.clone();
        let mut replacement = None;
        while replacement.is_none() && !frontier.is_empty() {
            let mut ring = Vec::new();
            for &p in &frontier {
                let (x, y) = (p % width, p / width);
                let neighbours = [
                    (x > 0).then(|| p - 1),
                    (x + 1 < width).then(|| p + 1),
                    (y > 0).then(|| p - width),
                    (y + 1 < height).then(|| p + width),
                ];
                for q in neighbours.into_iter().flatten() {
                    if visited[q] != stamp {
                        visited[q] = stamp;
                        ring.push(q);
                    }
                }
            }
            let mut counts: Vec<(u32, usize)> = Vec::new();
            for &q in &ring {
                let l = labels[q];
                if l <= n_bg {
                    match counts.iter_mut().find(|(cl, _)| *cl == l) {
                        Some(entry) => entry.1 += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            replacement = counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l);
            frontier = ring;
        }
        // A page with no background pixels at all keeps the group.
        if let Some(bg) = replacement {
            debug_assert!(label as u32 > n_bg);
            for &p in pixels {
                labels[p] = bg;
            }
        }
    }
}

/// Renumbers surviving foreground labels to `n_bg+1..` in ascending order.
fn compact_labels(labels: &mut [u32], n_bg: u32, n_total: u32) -> u32 {
    let mut present = vec![false; n_total as usize + 1];
    for &l in labels.iter() {
        present[l as usize] = true;
    }
    let mut remap = vec![0u32; n_total as usize + 1];
    let mut next = n_bg;
    for l in n_bg + 1..=n_total {
        if present[l as usize] {
            next += 1;
            remap[l as usize] = next;
        }
    }
    for l in labels.iter_mut() {
        if *l > n_bg {
            *l = remap[*l as usize];
        }
    }
    next - n_bg
}

/// Label expansion, downsampling to `model_res`, SLIC splitting of large
/// groups, dissolution of tiny groups and label compaction.
///
/// `gray` is the single-channel page content at model resolution.
pub fn postprocess(
    mask: &SegmentationMask,
    cfg: &KernelConfig,
    model_res: (usize, usize),
    gray: &RasterImage,
) -> Result<SegmentationMask, SegmentationError> {
    let (mw, mh) = model_res;
    if (gray.width(), gray.height()) != model_res || gray.channels() != 1 {
        return Err(SegmentationError::DimensionMismatch(
            (gray.width(), gray.height()),
            model_res,
        ));
    }
    let resized = expand_and_resize(mask, cfg.expansion, mw, mh)?;
    let n_bg = resized.n_bg;
    let mut n_total = resized.n_groups();
    let mut labels = resized.labels;

    split_large_groups(&mut labels, mw, n_bg, &mut n_total, gray.data(), &cfg.slic);
    dissolve_small_groups(&mut labels, mw, n_bg, n_total, cfg.min_area);
    let n_fg = compact_labels(&mut labels, n_bg, n_total);

    Ok(SegmentationMask {
        width: mw,
        height: mh,
        labels,
        n_bg,
        n_fg,
    })
}

/// Page content shared by all kernel pipelines.
#[derive(Debug, Clone)]
pub struct PreparedDocument {
    /// Opened binary page at working resolution.
    pub working: BinaryImage,
    /// Grayscale page at model resolution.
    pub gray_model: RasterImage,
    pub binarization: Binarization,
}

/// Grayscale, Otsu, pad to square, resize to the working size, open.
pub fn prepare_document(
    img: &RasterImage,
    cfg: &PipelineConfig,
    model_res: (usize, usize),
) -> Result<PreparedDocument, SegmentationError> {
    let gray = to_grayscale(img)?;
    let (binary, binarization) = otsu_binarize(&gray)?;
    let ws = cfg.working_size;
    let working = binary.pad_to_square().resize_nearest(ws, ws)?;
    let working = morph_open(&working, cfg.open_kernel);
    let gray_model = gray.pad_to_square(1.0).resize_nearest(model_res.0, model_res.1)?;
    Ok(PreparedDocument {
        working,
        gray_model,
        binarization,
    })
}

pub fn mask_for_kernel(
    doc: &PreparedDocument,
    kernel: &KernelConfig,
    model_res: (usize, usize),
) -> Result<SegmentationMask, SegmentationError> {
    let (w, h) = (doc.working.width(), doc.working.height());
    let fg = segment_foreground(&doc.working, kernel.fg_kernel);
    let bg = segment_background(w, h, kernel.bg_patch)?;
    let combined = combine_masks(&bg, &fg)?;
    postprocess(&combined, kernel, model_res, &doc.gray_model)
}

/// One mask per kernel configuration, in configuration order.
pub fn build_masks(
    img: &RasterImage,
    cfg: &PipelineConfig,
    model_res: (usize, usize),
) -> Result<Vec<SegmentationMask>, SegmentationError> {
    if cfg.kernels.is_empty() {
        return Err(SegmentationError::NoKernels);
    }
    let doc = prepare_document(img, cfg, model_res)?;
    cfg.kernels
        .par_iter()
        .map(|k| mask_for_kernel(&doc, k, model_res))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squares(gap: usize) -> BinaryImage {
        BinaryImage::from_fn(60, 30, move |x, y| {
            (10..20).contains(&y) && ((5..15).contains(&x) || (15 + gap..25 + gap).contains(&x))
        })
    }

    /// Plain flood fill over the dilated image, independent of the labeling code.
    fn component_count_oracle(img: &BinaryImage, k: usize) -> usize {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let r = (k / 2) as i64;
        let fg = |x: i64, y: i64| -> bool {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (sx, sy) = (x + dx, y + dy);
                    sx >= 0 && sy >= 0 && sx < w && sy < h && img.is_foreground(sx as usize, sy as usize)
                })
            })
        };
        let mut seen = std::collections::HashSet::new();
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if !fg(x, y) || seen.contains(&(x, y)) {
                    continue;
                }
                n += 1;
                let mut queue = std::collections::VecDeque::from([(x, y)]);
                seen.insert((x, y));
                while let Some((cx, cy)) = queue.pop_front() {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nx, ny) = (cx + dx, cy + dy);
                            if nx >= 0 && ny >= 0 && nx < w && ny < h && fg(nx, ny) && seen.insert((nx, ny)) {
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn background_grid_examples() {
        let grid = segment_background(1024, 1024, [64, 64]).unwrap();
        assert_eq!(grid.n_bg(), 256);
        let whole = segment_background(32, 32, [32, 32]).unwrap();
        assert!(whole.labels().iter().all(|&l| l == 1));
        let quad = segment_background(1024, 1024, [512, 512]).unwrap();
        let at = |x: usize, y: usize| quad.labels()[y * 1024 + x];
        assert_eq!((at(0, 0), at(1023, 0), at(0, 1023), at(1023, 1023)), (1, 2, 3, 4));
        assert!(matches!(
            segment_background(32, 32, [64, 16]),
            Err(SegmentationError::PatchTooLarge { .. })
        ));
        assert!(matches!(
            segment_background(30, 30, [16, 16]),
            Err(SegmentationError::PatchNotDivisor { .. })
        ));
    }

    #[test]
    fn foreground_components_examples() {
        let se = StructuringElement::square(5).unwrap();
        let blank = segment_foreground(&BinaryImage::blank(20, 20), se);
        assert_eq!(blank.count, 0);
        assert!(blank.labels.iter().all(|&l| l == 0));

        let far = squares(20);
        assert_eq!(segment_foreground(&far, se).count, 2);
        assert_eq!(component_count_oracle(&far, 5), 2);

        let near = squares(3);
        assert_eq!(segment_foreground(&near, se).count, 1);
        assert_eq!(component_count_oracle(&near, 5), 1);
    }

    #[test]
    fn discovery_order_is_raster() {
        let img = BinaryImage::from_fn(10, 10, |x, y| (x == 8 && y == 1) || (x == 1 && y == 5));
        let cc = connected_components(&img);
        assert_eq!(cc.labels[10 + 8], 1);
        assert_eq!(cc.labels[5 * 10 + 1], 2);
    }

    #[test]
    fn combine_examples() {
        let bg = segment_background(8, 8, [4, 4]).unwrap();
        let blank_fg = ComponentLabels {
            width: 8,
            height: 8,
            labels: vec![0; 64],
            count: 0,
        };
        assert_eq!(combine_masks(&bg, &blank_fg).unwrap(), bg);

        let blob = BinaryImage::from_fn(8, 8, |x, y| (1..3).contains(&x) && (1..3).contains(&y));
        let fg = connected_components(&blob);
        let m = combine_masks(&bg, &fg).unwrap();
        assert_eq!((m.n_bg(), m.n_fg()), (4, 1));
        for y in 0..8 {
            for x in 0..8 {
                let l = m.labels()[y * 8 + x];
                let expected = if blob.is_foreground(x, y) {
                    5
                } else {
                    1 + (y / 4) as u32 * 2 + (x / 4) as u32
                };
                assert_eq!(l, expected);
            }
        }

        let big = segment_background(1024, 1024, [64, 64]).unwrap();
        let mut labels = vec![0u32; 1024 * 1024];
        labels[500] = 3;
        labels[501] = 1;
        labels[502] = 2;
        let fg = ComponentLabels {
            width: 1024,
            height: 1024,
            labels,
            count: 3,
        };
        let m = combine_masks(&big, &fg).unwrap();
        assert_eq!(m.labels()[500], 259);

        let other = segment_background(16, 8, [4, 4]).unwrap();
        assert!(combine_masks(&other, &blank_fg).is_err());
    }

    #[test]
    fn expansion_only_touches_background() {
        let bg = segment_background(20, 20, [10, 10]).unwrap();
        let img = BinaryImage::from_fn(20, 20, |x, y| (x == 5 && y == 5) || (x == 9 && y == 5));
        let m = combine_masks(&bg, &connected_components(&img)).unwrap();
        let e = expand_labels(&m, 2);
        for (before, after) in m.labels().iter().zip(e.labels()) {
            if *before > m.n_bg() {
                assert_eq!(before, after);
            }
        }
        // Pixel (7,5) is two steps from both dots; the lower label (5) wins.
        assert_eq!(e.labels()[5 * 20 + 7], 5);
        assert_eq!(e.labels()[5 * 20 + 3], 5);
        assert_eq!(e.labels()[5 * 20 + 11], 6);
    }

    fn flat_gray(w: usize, h: usize) -> RasterImage {
        RasterImage::filled(w, h, 1, 1.0)
    }

    #[test]
    fn postprocess_without_foreground_is_resize() {
        let grid = segment_background(64, 64, [16, 16]).unwrap();
        let cfg = KernelConfig::with_kernel(5, 5).unwrap();
        let out = postprocess(&grid, &cfg, (32, 32), &flat_gray(32, 32)).unwrap();
        assert_eq!(out, grid.resize_nearest(32, 32).unwrap());
    }

    #[test]
    fn postprocess_dissolves_small_speck() {
        let grid = segment_background(32, 32, [16, 16]).unwrap();
        let img = BinaryImage::from_fn(32, 32, |x, y| y == 20 && (20..23).contains(&x));
        let mut cfg = KernelConfig::with_kernel(1, 1).unwrap();
        cfg.expansion = 0;
        cfg.min_area = 4;
        let m = combine_masks(&grid, &connected_components(&img)).unwrap();
        assert_eq!(m.n_fg(), 1);
        let out = postprocess(&m, &cfg, (32, 32), &flat_gray(32, 32)).unwrap();
        assert_eq!(out.n_fg(), 0);
        assert_eq!(out, grid);

        cfg.min_area = 3;
        let kept = postprocess(&m, &cfg, (32, 32), &flat_gray(32, 32)).unwrap();
        assert_eq!(kept.n_fg(), 1);
    }

    #[test]
    fn postprocess_splits_large_region_with_slic() {
        let (w, h) = (224, 224);
        let grid = segment_background(w, h, [16, 16]).unwrap();
        let rows = 67; // ~30% of the page
        let img = BinaryImage::from_fn(w, h, |_, y| (50..50 + rows).contains(&y));
        let m = combine_masks(&grid, &connected_components(&img)).unwrap();
        assert_eq!(m.n_fg(), 1);
        let mut cfg = KernelConfig::with_kernel(1, 1).unwrap();
        cfg.expansion = 0;
        let gray = img.to_raster();
        let out = postprocess(&m, &cfg, (w, h), &gray).unwrap();
        assert!((35..=65).contains(&out.n_fg()), "n_fg = {}", out.n_fg());
        // Partition of the former region, and every superpixel is compact.
        let areas = out.areas();
        let groups = out.group_pixels();
        let mut covered = 0;
        for l in out.n_bg() + 1..=out.n_groups() {
            let px = &groups[l as usize];
            covered += px.len();
            let xs: Vec<usize> = px.iter().map(|p| p % w).collect();
            let ys: Vec<usize> = px.iter().map(|p| p / w).collect();
            let bw = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
            let bh = ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1;
            assert!(bw * bh <= 4 * areas[l as usize], "superpixel {l} is not compact");
        }
        assert_eq!(covered, w * rows);
        assert!(SegmentationMask::new(w, h, out.labels().to_vec(), out.n_bg(), out.n_fg()).is_ok());
    }

    fn text_lines_page() -> RasterImage {
        // Five lines of dashes: 12px dashes, 2px gaps, 4px tall, 40px apart.
        let img = BinaryImage::from_fn(256, 256, |x, y| {
            let line = y / 40;
            (1..=5).contains(&line) && (y % 40) < 4 && (16..240).contains(&x) && (x - 16) % 14 < 12
        });
        img.to_raster()
    }

    #[test]
    fn kernel_granularity_ordering() {
        let page = text_lines_page();
        let masks = build_masks(&page, &PipelineConfig::default(), (224, 224)).unwrap();
        assert_eq!(masks.len(), 3);
        let (word, block, line) = (&masks[0], &masks[1], &masks[2]);
        assert!(line.n_fg() <= 5, "line kernel gave {}", line.n_fg());
        // 16 dashes per line; 8px gaps at working resolution survive 5x5 dilation.
        assert!(word.n_fg() >= 5 * 16, "word kernel gave {}", word.n_fg());
        assert!(block.n_fg() >= line.n_fg());
    }

    #[test]
    fn blank_page_gives_pure_grids() {
        let page = RasterImage::filled(300, 200, 1, 1.0);
        let masks = build_masks(&page, &PipelineConfig::default(), (224, 224)).unwrap();
        assert_eq!(masks.len(), 3);
        let grid = segment_background(1024, 1024, [64, 64])
            .unwrap()
            .resize_nearest(224, 224)
            .unwrap();
        for m in masks {
            assert_eq!(m.n_fg(), 0);
            assert_eq!(m, grid);
        }
    }

    #[test]
    fn build_masks_is_deterministic() {
        let page = text_lines_page();
        let cfg = PipelineConfig::default();
        assert_eq!(
            build_masks(&page, &cfg, (224, 224)).unwrap(),
            build_masks(&page, &cfg, (224, 224)).unwrap()
        );
        let empty = PipelineConfig {
            kernels: vec![],
            ..PipelineConfig::default()
        };
        assert!(matches!(build_masks(&page, &empty, (224, 224)), Err(SegmentationError::NoKernels)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Raster-order flood fill with explicit 8-neighborhoods.
        fn flood_labels(img: &BinaryImage) -> (Vec<u32>, u32) {
            let (w, h) = (img.width() as i64, img.height() as i64);
            let mut labels = vec![0u32; (w * h) as usize];
            let mut count = 0;
            for start in 0..w * h {
                let (x, y) = (start % w, start / w);
                if !img.is_foreground(x as usize, y as usize) || labels[start as usize] != 0 {
                    continue;
                }
                count += 1;
                labels[start as usize] = count;
                let mut stack = vec![(x, y)];
                while let Some((cx, cy)) = stack.pop() {
                    for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h || !img.is_foreground(nx as usize, ny as usize) {
                            continue;
                        }
                        let q = (ny * w + nx) as usize;
                        if labels[q] == 0 {
                            labels[q] = count;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            (labels, count)
        }

        fn sparse_binary() -> impl Strategy<Value = BinaryImage> {
            (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
                proptest::collection::vec(prop_oneof![3 => Just(1u8), 2 => Just(0u8)], w * h)
                    .prop_map(move |d| BinaryImage::new(w, h, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn components_match_flood_fill(img in sparse_binary()) {
                let got = connected_components(&img);
                let (labels, count) = flood_labels(&img);
                prop_assert_eq!(got.count, count);
                prop_assert_eq!(got.labels, labels);
            }
        }

        fn random_mask() -> impl Strategy<Value = SegmentationMask> {
            (4usize..24, 4usize..24).prop_flat_map(|(w, h)| {
                proptest::collection::vec(prop_oneof![3 => Just(0u32), 1 => 1u32..6], w * h).prop_map(
                    move |raw| {
                        // Two background cells split at the middle column; fg labels 3..=7.
                        let labels = raw
                            .iter()
                            .enumerate()
                            .map(|(p, &v)| if v == 0 { 1 + (p % w >= w / 2) as u32 } else { v + 2 })
                            .collect::<Vec<_>>();
                        let n_fg = labels.iter().copied().max().unwrap_or(2).saturating_sub(2);
                        SegmentationMask {
                            width: w,
                            height: h,
                            labels,
                            n_bg: 2,
                            n_fg,
                        }
                    },
                )
            })
        }

        proptest! {
            #[test]
            fn sampled_expansion_matches_full_expansion(
                mask in random_mask(),
                steps in 0usize..4,
                out_w in 1usize..30,
                out_h in 1usize..30,
            ) {
                let full = expand_labels(&mask, steps).resize_nearest(out_w, out_h).unwrap();
                let sampled = expand_and_resize(&mask, steps, out_w, out_h).unwrap();
                prop_assert_eq!(full.labels, sampled.labels);
            }

            #[test]
            fn expansion_only_touches_background(mask in random_mask(), steps in 0usize..4) {
                let e = expand_labels(&mask, steps);
                for (a, b) in mask.labels.iter().zip(&e.labels) {
                    if *a > mask.n_bg {
                        prop_assert_eq!(a, b);
                    }
                }
            }
        }
    }
}
