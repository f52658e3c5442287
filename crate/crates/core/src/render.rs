//! PNG visualizations of masks and attribution maps.

use crate::attribution::AttributionMap;
use crate::imaging::{encode_png_rgb, ImagingError, RasterImage};
use crate::segmentation::SegmentationMask;

/// Opacity of the heatmap over the page.
pub const HEATMAP_ALPHA: f64 = 0.6;

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Background groups in alternating light grays, foreground groups in
/// saturated colors derived from the label.
pub fn mask_colors(mask: &SegmentationMask) -> Vec<[u8; 3]> {
    let n_bg = mask.n_bg();
    (0..=mask.n_groups())
        .map(|l| {
            if l <= n_bg {
                let g = if l % 2 == 0 { 235 } else { 215 };
                [g, g, g]
            } else {
                let h = mix(l as u64);
                let c = |shift: u32| 40 + ((h >> shift) & 0xFF) as u8 % 180;
                [c(0), c(8), c(16)]
            }
        })
        .collect()
}

pub fn mask_png(mask: &SegmentationMask) -> Vec<u8> {
    let colors = mask_colors(mask);
    let rgb: Vec<u8> = mask
        .labels()
        .iter()
        .flat_map(|&l| colors[l as usize])
        .collect();
    encode_png_rgb(mask.width(), mask.height(), &rgb)
}

/// Diverging blue-white-red color for `t` in `[-1, 1]`.
pub fn diverging(t: f64) -> [f64; 3] {
    let t = t.clamp(-1.0, 1.0);
    if t >= 0.0 {
        [1.0, 1.0 - t, 1.0 - t]
    } else {
        [1.0 + t, 1.0 + t, 1.0]
    }
}

/// RGB heatmap of `map` blended over `page` (same size). Values are scaled by
/// the largest magnitude so zero is always white; an all-zero map renders as a
/// uniformly neutral tint of the page.
pub fn heatmap_rgb(map: &AttributionMap, page: &RasterImage) -> Result<Vec<u8>, ImagingError> {
    if (page.width(), page.height()) != (map.width, map.height) {
        return Err(ImagingError::SizeMismatch(format!(
            "page is {}x{}, map is {}x{}",
            page.width(),
            page.height(),
            map.width,
            map.height
        )));
    }
    let scale = map.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::with_capacity(map.values.len() * 3);
    for (i, &v) in map.values.iter().enumerate() {
        let t = if scale > 0.0 { v / scale } else { 0.0 };
        let gray = page.intensity(i) as f64;
        for c in diverging(t) {
            let blended = HEATMAP_ALPHA * c + (1.0 - HEATMAP_ALPHA) * gray;
            out.push((blended * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn heatmap_png(map: &AttributionMap, page: &RasterImage) -> Result<Vec<u8>, ImagingError> {
    Ok(encode_png_rgb(map.width, map.height, &heatmap_rgb(map, page)?))
}
