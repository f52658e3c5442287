//! Feature-ablation attribution over segmentation masks, plus the Occlusion
//! and random reference methods.
//!
//! For a mask `M` with groups `M_i`, the raw score of group `i` is
//! `S_i = f(I)[t] - f(I with M_i replaced by the baseline)[t]` where the
//! baseline paints background groups black and foreground groups white. Each
//! pixel of `M_i` then carries `S_i / |M_i|`, and maps from several masks are
//! summed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::RasterImage;
use crate::model::{ClassifierHandle, ModelError};
use crate::segmentation::SegmentationMask;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: image {image:?}, mask {mask:?}")]
    DimensionMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("group label {0} is not part of the mask")]
    UnknownGroup(u32),
    #[error("at least one mask is required")]
    NoMasks,
    #[error("invalid occlusion parameters: {0}")]
    InvalidOcclusion(String),
}

/// Which groups are ablated: only foreground, or foreground and background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Fg,
    FgBg,
}

/// Provenance of an attribution map; the numeric code is used on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Fg,
    FgBg,
    Occlusion,
    Random,
}

impl MapKind {
    pub fn code(self) -> u8 {
        match self {
            MapKind::Fg => 0,
            MapKind::FgBg => 1,
            MapKind::Occlusion => 2,
            MapKind::Random => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MapKind::Fg,
            1 => MapKind::FgBg,
            2 => MapKind::Occlusion,
            3 => MapKind::Random,
            _ => return None,
        })
    }
}

impl From<AblationMode> for MapKind {
    fn from(mode: AblationMode) -> Self {
        match mode {
            AblationMode::Fg => MapKind::Fg,
            AblationMode::FgBg => MapKind::FgBg,
        }
    }
}

/// Signed per-pixel importance at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub kind: MapKind,
    pub target_class: usize,
}

impl AttributionMap {
    pub fn zeros(width: usize, height: usize, kind: MapKind, target_class: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            kind,
            target_class,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-pixel replacement values: 0 (black) on background groups, 1 (white)
/// on foreground groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineMatrix {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub label: u32,
    /// Unnormalized score drop `S_i`.
    pub score: f64,
    pub area: usize,
}

/// Attribution of a single mask together with its raw group scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAttribution {
    pub map: AttributionMap,
    pub groups: Vec<GroupScore>,
}

pub fn baseline_for(mask: &SegmentationMask) -> BaselineMatrix {
    BaselineMatrix {
        width: mask.width(),
        height: mask.height(),
        values: mask
            .labels()
            .iter()
            .map(|&l| u8::from(mask.is_foreground_label(l)))
            .collect(),
    }
}

fn check_dims(img: &RasterImage, mask: &SegmentationMask) -> Result<(), AttributionError> {
    if (img.width(), img.height()) != (mask.width(), mask.height()) {
        return Err(AttributionError::DimensionMismatch {
            image: (img.width(), img.height()),
            mask: (mask.width(), mask.height()),
        });
    }
    Ok(())
}

/// Copy of `img` with `pixels` replaced by their baseline value in every channel.
pub fn ablate(img: &RasterImage, baseline: &BaselineMatrix, pixels: &[usize]) -> RasterImage {
    let mut out = img.clone();
    for &p in pixels {
        out.set_pixel_all(p, baseline.values[p] as f32);
    }
    out
}

/// Raw score drops for `labels`, scored in batches of the model's `max_batch`.
/// Empty groups score 0 without a model call.
fn score_groups(
    model: &ClassifierHandle,
    img: &RasterImage,
    mask: &SegmentationMask,
    target: usize,
    base_score: f64,
    labels: &[u32],
) -> Result<Vec<GroupScore>, AttributionError> {
    let baseline = baseline_for(mask);
    let pixels = mask.group_pixels();
    let mut out: Vec<GroupScore> = labels
        .iter()
        .map(|&label| GroupScore {
            label,
            score: 0.0,
            area: pixels[label as usize].len(),
        })
        .collect();
    let nonempty: Vec<usize> = (0..labels.len()).filter(|&k| out[k].area > 0).collect();
    let group = |k: usize| &pixels[labels[nonempty[k]] as usize];
    let scores = model.score_perturbations(
        img,
        target,
        nonempty.len(),
        |k, buf| {
            for &p in group(k) {
                buf.set_pixel_all(p, baseline.values[p] as f32);
            }
        },
        |k, buf, orig| {
            for &p in group(k) {
                buf.copy_pixel_from(orig, p);
            }
        },
    )?;
    for (&k, s) in nonempty.iter().zip(scores) {
        out[k].score = base_score - s;
    }
    Ok(out)
}

pub fn ablate_group(
    model: &ClassifierHandle,
    img: &RasterImage,
    mask: &SegmentationMask,
    label: u32,
    target: usize,
) -> Result<GroupScore, AttributionError> {
    check_dims(img, mask)?;
    if label == 0 || label > mask.n_groups() {
        return Err(AttributionError::UnknownGroup(label));
    }
    let base = model.target_scores(std::slice::from_ref(img), target)?[0];
    Ok(score_groups(model, img, mask, target, base, &[label])?.remove(0))
}

fn labels_for(mask: &SegmentationMask, mode: AblationMode) -> Vec<u32> {
    let first = match mode {
        AblationMode::Fg => mask.n_bg() + 1,
        AblationMode::FgBg => 1,
    };
    (first..=mask.n_groups()).collect()
}

fn spread(mask: &SegmentationMask, groups: &[GroupScore], kind: MapKind, target: usize) -> AttributionMap {
    let mut per_label = vec![0.0f64; mask.n_groups() as usize + 1];
    for g in groups {
        if g.area > 0 {
            per_label[g.label as usize] = g.score / g.area as f64;
        }
    }
    AttributionMap {
        width: mask.width(),
        height: mask.height(),
        values: mask.labels().iter().map(|&l| per_label[l as usize]).collect(),
        kind,
        target_class: target,
    }
}

/// Area-normalized attribution of one mask. In `Fg` mode background pixels
/// are 0 and only foreground groups are ablated.
pub fn attribute_mask(
    model: &ClassifierHandle,
    img: &RasterImage,
    mask: &SegmentationMask,
    target: usize,
    mode: AblationMode,
) -> Result<MaskAttribution, AttributionError> {
    check_dims(img, mask)?;
    let base = model.target_scores(std::slice::from_ref(img), target)?[0];
    let groups = score_groups(model, img, mask, target, base, &labels_for(mask, mode))?;
    Ok(MaskAttribution {
        map: spread(mask, &groups, mode.into(), target),
        groups,
    })
}

/// Both modes from a single pass over all groups. The foreground map reuses
/// the foreground group scores of the full pass.
pub fn attribute_mask_both(
    model: &ClassifierHandle,
    img: &RasterImage,
    mask: &SegmentationMask,
    target: usize,
) -> Result<(MaskAttribution, MaskAttribution), AttributionError> {
    let full = attribute_mask(model, img, mask, target, AblationMode::FgBg)?;
    let fg_groups: Vec<GroupScore> = full
        .groups
        .iter()
        .filter(|g| mask.is_foreground_label(g.label))
        .copied()
        .collect();
    let fg = MaskAttribution {
        map: spread(mask, &fg_groups, MapKind::Fg, target),
        groups: fg_groups,
    };
    Ok((fg, full))
}

fn sum_maps(maps: impl IntoIterator<Item = AttributionMap>) -> Option<AttributionMap> {
    let mut iter = maps.into_iter();
    let mut total = iter.next()?;
    for m in iter {
        for (t, v) in total.values.iter_mut().zip(&m.values) {
            *t += v;
        }
    }
    Some(total)
}

/// Sum of the per-mask normalized maps, in mask order.
pub fn attribute(
    model: &ClassifierHandle,
    img: &RasterImage,
    masks: &[SegmentationMask],
    target: usize,
    mode: AblationMode,
) -> Result<AttributionMap, AttributionError> {
    let maps = masks
        .iter()
        .map(|m| attribute_mask(model, img, m, target, mode).map(|a| a.map))
        .collect::<Result<Vec<_>, _>>()?;
    sum_maps(maps).ok_or(AttributionError::NoMasks)
}

/// `(Fg, FgBg)` summed maps sharing one ablation pass per mask.
pub fn attribute_both(
    model: &ClassifierHandle,
    img: &RasterImage,
    masks: &[SegmentationMask],
    target: usize,
) -> Result<(AttributionMap, AttributionMap), AttributionError> {
    let mut fg = Vec::new();
    let mut full = Vec::new();
    for m in masks {
        let (a, b) = attribute_mask_both(model, img, m, target)?;
        fg.push(a.map);
        full.push(b.map);
    }
    Ok((
        sum_maps(fg).ok_or(AttributionError::NoMasks)?,
        sum_maps(full).ok_or(AttributionError::NoMasks)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionParams {
    pub patch: usize,
    pub stride: usize,
    /// Value painted into the occluded window, in every channel.
    pub fill: f32,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self {
            patch: 16,
            stride: 8,
            fill: 0.5,
        }
    }
}

impl OcclusionParams {
    /// 16/8 for inputs up to 224 pixels, 32/16 above.
    pub fn for_input(side: usize) -> Self {
        if side > 224 {
            Self {
                patch: 32,
                stride: 16,
                fill: 0.5,
            }
        } else {
            Self::default()
        }
    }
}

/// Sliding-window occlusion. Each window's score drop is added to every pixel
/// it covers; pixels average over their covering windows. Pixels covered by no
/// window stay 0.
pub fn occlusion(
    model: &ClassifierHandle,
    img: &RasterImage,
    target: usize,
    params: OcclusionParams,
) -> Result<AttributionMap, AttributionError> {
    let OcclusionParams { patch, stride, fill } = params;
    let (w, h) = (img.width(), img.height());
    if stride == 0 || patch < stride {
        return Err(AttributionError::InvalidOcclusion(format!(
            "need patch >= stride >= 1, got patch {patch}, stride {stride}"
        )));
    }
    if patch > w || patch > h {
        return Err(AttributionError::InvalidOcclusion(format!(
            "patch {patch} larger than image {w}x{h}"
        )));
    }
    let base = model.target_scores(std::slice::from_ref(img), target)?[0];
    let windows: Vec<(usize, usize)> = (0..=h - patch)
        .step_by(stride)
        .flat_map(|y| (0..=w - patch).step_by(stride).map(move |x| (x, y)))
        .collect();

    let rows = |k: usize| {
        let (x0, y0) = windows[k];
        (y0..y0 + patch).map(move |y| (y * w + x0)..(y * w + x0 + patch))
    };
    let scores = model.score_perturbations(
        img,
        target,
        windows.len(),
        |k, buf| {
            for span in rows(k) {
                for p in span {
                    buf.set_pixel_all(p, fill);
                }
            }
        },
        |k, buf, orig| {
            for span in rows(k) {
                for p in span {
                    buf.copy_pixel_from(orig, p);
                }
            }
        },
    )?;
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    for (&(x0, y0), s) in windows.iter().zip(scores) {
        let drop = base - s;
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                sum[y * w + x] += drop;
                count[y * w + x] += 1;
            }
        }
    }
    let values = sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(AttributionMap {
        width: w,
        height: h,
        values,
        kind: MapKind::Occlusion,
        target_class: target,
    })
}

/// I.i.d. uniform `[0, 1)` values from a seeded ChaCha8 stream.
pub fn random_baseline(width: usize, height: usize, seed: u64, target: usize) -> AttributionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AttributionMap {
        width,
        height,
        values: (0..width * height).map(|_| rng.random::<f64>()).collect(),
        kind: MapKind::Random,
        target_class: target,
    }
}

/// Argmax class of the unablated image.
pub fn default_target(model: &ClassifierHandle, img: &RasterImage) -> Result<usize, ModelError> {
    Ok(model.score(img)?.argmax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BinaryImage;
    use crate::model::{Rect, SyntheticClassifier};
    use crate::segmentation::{combine_masks, connected_components, segment_background};

    fn density_model(w: usize, h: usize, r: Rect) -> ClassifierHandle {
        ClassifierHandle::synthetic(SyntheticClassifier::region_density(w, h, r).unwrap())
    }

    fn mask_with_blob(blob: &BinaryImage, patch: usize) -> SegmentationMask {
        let grid = segment_background(blob.width(), blob.height(), [patch, patch]).unwrap();
        combine_masks(&grid, &connected_components(blob)).unwrap()
    }

    #[test]
    fn baseline_examples() {
        let grid = segment_background(8, 8, [4, 4]).unwrap();
        assert!(baseline_for(&grid).values.iter().all(|&v| v == 0));

        let blob = BinaryImage::from_fn(8, 8, |x, y| x < 2 && y < 2);
        let mask = mask_with_blob(&blob, 4);
        let b = baseline_for(&mask);
        for (i, &v) in b.values.iter().enumerate() {
            assert_eq!(v == 1, blob.data()[i] == 0);
        }

        let checker = BinaryImage::from_fn(8, 8, |x, y| (x / 2 + y / 2) % 2 == 0 && x % 2 == 0 && y % 2 == 0);
        let m = mask_with_blob(&checker, 4);
        let b = baseline_for(&m);
        for (i, &v) in b.values.iter().enumerate() {
            assert_eq!(v, u8::from(m.labels()[i] > m.n_bg()));
        }
    }

    #[test]
    fn ablate_group_examples() {
        let constant = ClassifierHandle::synthetic(SyntheticClassifier::constant(16, 16, 0.5).unwrap());
        let blob = BinaryImage::from_fn(16, 16, |x, y| (2..5).contains(&x) && (2..6).contains(&y));
        let mask = mask_with_blob(&blob, 8);
        let img = blob.to_raster();
        for label in 1..=mask.n_groups() {
            assert_eq!(ablate_group(&constant, &img, &mask, label, 0).unwrap().score, 0.0);
        }

        let r = Rect::new(0, 0, 8, 8);
        let model = density_model(16, 16, r);
        let g = ablate_group(&model, &img, &mask, 5, 0).unwrap();
        assert_eq!(g.area, 12);
        assert!((g.score - 12.0 / 64.0).abs() < 1e-12);

        // Background cell 1 inside R; flipping its white pixels to black adds ink.
        let g1 = ablate_group(&model, &img, &mask, 1, 0).unwrap();
        assert_eq!(g1.area, 64 - 12);
        assert!((g1.score + (64.0 - 12.0) / 64.0).abs() < 1e-12);

        assert!(matches!(
            ablate_group(&model, &img, &mask, 99, 0),
            Err(AttributionError::UnknownGroup(99))
        ));
    }

    #[test]
    fn normalization_conserves_group_score() {
        let blob = BinaryImage::from_fn(8, 8, |x, y| (5..7).contains(&x) && (5..7).contains(&y));
        let mask = mask_with_blob(&blob, 8);
        let model = density_model(8, 8, Rect::new(0, 0, 8, 8));
        let a = attribute_mask(&model, &blob.to_raster(), &mask, 0, AblationMode::Fg).unwrap();
        let g = a.groups[0];
        assert_eq!(g.area, 4);
        assert!((g.score - 4.0 / 64.0).abs() < 1e-12);
        let sum: f64 = mask
            .labels()
            .iter()
            .zip(&a.map.values)
            .filter(|(&l, _)| l == g.label)
            .map(|(_, v)| v)
            .sum();
        assert!((sum - g.score).abs() < 1e-12);
        assert!(a.map.values.iter().zip(mask.labels()).all(|(v, &l)| l == g.label || *v == 0.0));
    }

    #[test]
    fn fg_mode_ignores_important_background() {
        // R is a background cell with no ink: only background ablation matters.
        let blob = BinaryImage::from_fn(16, 16, |x, y| x >= 10 && y >= 10 && x < 13 && y < 13);
        let mask = mask_with_blob(&blob, 8);
        let model = density_model(16, 16, Rect::new(0, 0, 8, 8));
        let img = blob.to_raster();
        let fg = attribute_mask(&model, &img, &mask, 0, AblationMode::Fg).unwrap();
        assert!(fg.map.values.iter().all(|&v| v == 0.0));
        let full = attribute_mask(&model, &img, &mask, 0, AblationMode::FgBg).unwrap();
        assert!(full.map.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn combined_modes_agree_with_separate_runs() {
        let blob = BinaryImage::from_fn(16, 16, |x, y| (x + y) % 7 == 0 && y > 3);
        let mask = mask_with_blob(&blob, 8);
        let model = density_model(16, 16, Rect::new(2, 2, 10, 10));
        let img = blob.to_raster();
        let (fg, full) = attribute_mask_both(&model, &img, &mask, 0).unwrap();
        assert_eq!(fg, attribute_mask(&model, &img, &mask, 0, AblationMode::Fg).unwrap());
        assert_eq!(full, attribute_mask(&model, &img, &mask, 0, AblationMode::FgBg).unwrap());
    }

    #[test]
    fn batching_does_not_change_results() {
        let blob = BinaryImage::from_fn(16, 16, |x, y| (x * y) % 5 == 1);
        let mask = mask_with_blob(&blob, 4);
        let img = blob.to_raster();
        let r = Rect::new(1, 1, 12, 9);
        let one = ClassifierHandle::synthetic(SyntheticClassifier::region_density(16, 16, r).unwrap().with_max_batch(1));
        let many = ClassifierHandle::synthetic(SyntheticClassifier::region_density(16, 16, r).unwrap().with_max_batch(7));
        assert_eq!(
            attribute(&one, &img, &[mask.clone(), mask.clone()], 0, AblationMode::FgBg).unwrap(),
            attribute(&many, &img, &[mask.clone(), mask], 0, AblationMode::FgBg).unwrap()
        );
    }

    #[test]
    fn occlusion_examples() {
        let constant = ClassifierHandle::synthetic(SyntheticClassifier::constant(32, 32, 0.5).unwrap());
        let img = RasterImage::filled(32, 32, 1, 0.0);
        let map = occlusion(&constant, &img, 0, OcclusionParams::default()).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));

        // All-black page, R = whole image: each 16x16 window lowers darkness by
        // 0.5 on 256 pixels, so the drop is 128 / 1024 wherever it lands.
        let model = density_model(32, 32, Rect::new(0, 0, 32, 32));
        let map = occlusion(&model, &img, 0, OcclusionParams::default()).unwrap();
        assert!(map.values.iter().all(|&v| (v - 128.0 / 1024.0).abs() < 1e-12));

        // Stride equal to the patch: every pixel carries its own tile's drop.
        let half = BinaryImage::from_fn(32, 32, |x, _| x < 16).to_raster();
        let tiles = OcclusionParams { patch: 16, stride: 16, fill: 0.5 };
        let map = occlusion(&model, &half, 0, tiles).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expected = if x < 16 { 128.0 / 1024.0 } else { -128.0 / 1024.0 };
                assert!((map.values[y * 32 + x] - expected).abs() < 1e-12);
            }
        }

        assert!(occlusion(&model, &img, 0, OcclusionParams { patch: 64, stride: 8, fill: 0.5 }).is_err());
        assert!(occlusion(&model, &img, 0, OcclusionParams { patch: 4, stride: 8, fill: 0.5 }).is_err());
    }

    #[test]
    fn random_baseline_examples() {
        let a = random_baseline(224, 224, 7, 0);
        assert_eq!(a, random_baseline(224, 224, 7, 0));
        assert_ne!(a.values, random_baseline(224, 224, 8, 0).values);
        let mean = a.values.iter().sum::<f64>() / a.values.len() as f64;
        assert!((mean - 0.5).abs() < 0.02);
        assert!(a.values.iter().all(|v| (0.0..1.0).contains(v)));
    }
}
