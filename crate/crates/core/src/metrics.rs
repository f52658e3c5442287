//! Faithfulness and interpretability metrics for attribution maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AttributionMap;
use crate::imaging::{otsu_binarize, to_grayscale, ImagingError, RasterImage};
use crate::model::{ClassifierHandle, ModelError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("attribution is {attr:?} but image is {image:?}")]
    ResolutionMismatch {
        attr: (usize, usize),
        image: (usize, usize),
    },
    #[error("perturbation curves have different step grids")]
    GridMismatch,
    #[error("invalid metric parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Most relevant patches first.
    MoRF,
    /// Least relevant patches first.
    LeRF,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStep {
    pub fraction_removed: f64,
    pub score_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub direction: Direction,
    pub steps: Vec<CurveStep>,
}

impl PerturbationCurve {
    /// Mean drop over all steps, step 0 included.
    pub fn aopc(&self) -> f64 {
        compensated_sum(self.steps.iter().map(|s| s.score_drop)) / self.steps.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AopcParams {
    pub patch: usize,
    pub steps: usize,
}

impl Default for AopcParams {
    fn default() -> Self {
        Self { patch: 8, steps: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityParams {
    pub radius: f64,
    pub n_samples: usize,
}

impl Default for SensitivityParams {
    fn default() -> Self {
        Self {
            radius: 0.02,
            n_samples: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfidelityParams {
    pub patch: usize,
    pub n_samples: usize,
}

impl Default for InfidelityParams {
    fn default() -> Self {
        Self {
            patch: 8,
            n_samples: 128,
        }
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_resolution(img: &RasterImage, attr: &AttributionMap) -> Result<(), MetricError> {
    if (img.width(), img.height()) != (attr.width, attr.height) {
        return Err(MetricError::ResolutionMismatch {
            attr: (attr.width, attr.height),
            image: (img.width(), img.height()),
        });
    }
    Ok(())
}

/// Square tiles of side `patch` (edge tiles may be smaller), raster order.
fn tiles(width: usize, height: usize, patch: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for y0 in (0..height).step_by(patch) {
        for x0 in (0..width).step_by(patch) {
            let mut px = Vec::with_capacity(patch * patch);
            for y in y0..(y0 + patch).min(height) {
                for x in x0..(x0 + patch).min(width) {
                    px.push(y * width + x);
                }
            }
            out.push(px);
        }
    }
    out
}

/// Tile indices ordered by mean attribution (descending for MoRF, ascending
/// for LeRF), ties in raster order.
pub fn rank_patches(attr: &AttributionMap, patch: usize, direction: Direction) -> Vec<usize> {
    let means: Vec<f64> = tiles(attr.width, attr.height, patch)
        .iter()
        .map(|px| px.iter().map(|&p| attr.values[p]).sum::<f64>() / px.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| {
        let by_value = match direction {
            Direction::MoRF => means[b].partial_cmp(&means[a]),
            Direction::LeRF => means[a].partial_cmp(&means[b]),
        };
        by_value
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Pixel-flipping perturbation curve. Patches are flipped cumulatively in
/// rank order: each pixel takes the opposite of its Otsu-binarized value.
pub fn aopc_curve(
    model: &ClassifierHandle,
    img: &RasterImage,
    attr: &AttributionMap,
    target: usize,
    direction: Direction,
    params: AopcParams,
) -> Result<PerturbationCurve, MetricError> {
    check_resolution(img, attr)?;
    if params.patch == 0 || params.steps == 0 {
        return Err(MetricError::InvalidParams("patch and steps must be >= 1".into()));
    }
    let (binary, _) = otsu_binarize(&to_grayscale(img)?)?;
    let flipped_value: Vec<f32> = binary.data().iter().map(|&b| 1.0 - b as f32).collect();

    let all_tiles = tiles(img.width(), img.height(), params.patch);
    let order = rank_patches(attr, params.patch, direction);
    let n_tiles = all_tiles.len();
    let steps = params.steps.min(n_tiles);

    let mut images = Vec::with_capacity(steps);
    let mut fractions = Vec::with_capacity(steps);
    let mut current = img.clone();
    let mut flipped = 0usize;
    for k in 1..=steps {
        let upto = k * n_tiles / steps;
        for &t in &order[flipped..upto] {
            for &p in &all_tiles[t] {
                current.set_pixel_all(p, flipped_value[p]);
            }
        }
        flipped = upto;
        images.push(current.clone());
        fractions.push(upto as f64 / n_tiles as f64);
    }

    let base = model.target_scores(std::slice::from_ref(img), target)?[0];
    let scores = model.target_scores(&images, target)?;
    let mut curve = vec![CurveStep {
        fraction_removed: 0.0,
        score_drop: 0.0,
    }];
    curve.extend(fractions.into_iter().zip(scores).map(|(f, s)| CurveStep {
        fraction_removed: f,
        score_drop: base - s,
    }));
    Ok(PerturbationCurve {
        direction,
        steps: curve,
    })
}

/// Area between the MoRF and LeRF curves: `AOPC(MoRF) - AOPC(LeRF)`.
pub fn abpc(morf: &PerturbationCurve, lerf: &PerturbationCurve) -> Result<f64, MetricError> {
    let same_grid = morf.steps.len() == lerf.steps.len()
        && morf
            .steps
            .iter()
            .zip(&lerf.steps)
            .all(|(a, b)| a.fraction_removed == b.fraction_removed);
    if !same_grid {
        return Err(MetricError::GridMismatch);
    }
    Ok(morf.aopc() - lerf.aopc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub value: f64,
    /// The unperturbed explanation was identically zero; `value` is then the
    /// largest unnormalized difference norm.
    pub zero_denominator: bool,
}

/// Max-sensitivity: the largest relative change of the explanation under
/// uniform `L_inf` perturbations of radius `radius` (clamped to `[0, 1]`).
pub fn sensitivity<E>(
    mut explain: impl FnMut(&RasterImage) -> Result<AttributionMap, E>,
    img: &RasterImage,
    params: SensitivityParams,
    seed: u64,
) -> Result<SensitivityResult, E>
where
    E: From<MetricError>,
{
    if params.radius <= 0.0 || params.n_samples == 0 {
        return Err(MetricError::InvalidParams("radius > 0 and n_samples >= 1 required".into()).into());
    }
    let reference = explain(img)?;
    let norm = reference.frobenius_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let radius = params.radius as f32;
    for _ in 0..params.n_samples {
        let data: Vec<f32> = img
            .data()
            .iter()
            .map(|&v| (v + rng.random_range(-radius..=radius)).clamp(0.0, 1.0))
            .collect();
        let perturbed = RasterImage::new(img.width(), img.height(), img.channels(), data)
            .map_err(MetricError::from)?;
        let other = explain(&perturbed)?;
        let diff = reference
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff);
    }
    if norm == 0.0 {
        Ok(SensitivityResult {
            value: worst,
            zero_denominator: true,
        })
    } else {
        Ok(SensitivityResult {
            value: worst / norm,
            zero_denominator: false,
        })
    }
}

/// Monte-Carlo infidelity with square zeroing perturbations: the mean of
/// `(sum(I_p * attr) - (f(x) - f(x - I_p)))^2` over random patch positions.
pub fn infidelity(
    model: &ClassifierHandle,
    img: &RasterImage,
    attr: &AttributionMap,
    target: usize,
    params: InfidelityParams,
    seed: u64,
) -> Result<f64, MetricError> {
    check_resolution(img, attr)?;
    let (w, h) = (img.width(), img.height());
    let p = params.patch;
    if p == 0 || p > w || p > h || params.n_samples == 0 {
        return Err(MetricError::InvalidParams(format!(
            "patch {p} on {w}x{h} with {} samples",
            params.n_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<(usize, usize)> = (0..params.n_samples)
        .map(|_| (rng.random_range(0..=w - p), rng.random_range(0..=h - p)))
        .collect();
    let base = model.target_scores(std::slice::from_ref(img), target)?[0];
    let rows = |k: usize| {
        let (x0, y0) = positions[k];
        (y0..y0 + p).map(move |y| (y * w + x0)..(y * w + x0 + p))
    };
    let scores = model.score_perturbations(
        img,
        target,
        positions.len(),
        |k, buf| {
            for span in rows(k) {
                for idx in span {
                    buf.set_pixel_all(idx, 0.0);
                }
            }
        },
        |k, buf, orig| {
            for span in rows(k) {
                for idx in span {
                    buf.copy_pixel_from(orig, idx);
                }
            }
        },
    )?;
    let errors: Vec<f64> = scores
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let dot: f64 = rows(k)
                .flatten()
                .map(|idx| img.intensity(idx) as f64 * attr.values[idx])
                .sum();
            let e = dot - (base - s);
            e * e
        })
        .collect();
    Ok(compensated_sum(errors.iter().copied()) / errors.len() as f64)
}

/// Average of the mean absolute horizontal and vertical neighbor differences.
pub fn continuity(attr: &AttributionMap) -> Result<f64, MetricError> {
    let (w, h) = (attr.width, attr.height);
    if w < 2 || h < 2 {
        return Err(MetricError::InvalidParams(format!(
            "continuity needs at least 2x2, got {w}x{h}"
        )));
    }
    let v = &attr.values;
    let horizontal = compensated_sum(
        (0..h).flat_map(|y| (0..w - 1).map(move |x| (v[y * w + x + 1] - v[y * w + x]).abs())),
    ) / (h * (w - 1)) as f64;
    let vertical = compensated_sum(
        (0..h - 1).flat_map(|y| (0..w).map(move |x| (v[(y + 1) * w + x] - v[y * w + x]).abs())),
    ) / ((h - 1) * w) as f64;
    Ok((horizontal + vertical) / 2.0)
}

/// Per-sample metric values for one attribution method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aopc_morf: f64,
    pub aopc_lerf: f64,
    pub abpc: f64,
    pub sensitivity: Option<f64>,
    #[serde(default)]
    pub sensitivity_zero_denominator: bool,
    pub infidelity: Option<f64>,
    pub continuity: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Mean of each metric over `reports`; optional metrics average over the
    /// samples that have them.
    pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| compensated_sum(reports.iter().map(f)) / n;
        let mean_opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| compensated_sum(vals.iter().copied()) / vals.len() as f64)
        };
        let aopc_morf = mean(&|r| r.aopc_morf);
        let aopc_lerf = mean(&|r| r.aopc_lerf);
        Some(MetricReport {
            aopc_morf,
            aopc_lerf,
            abpc: aopc_morf - aopc_lerf,
            sensitivity: mean_opt(&|r| r.sensitivity),
            sensitivity_zero_denominator: reports.iter().any(|r| r.sensitivity_zero_denominator),
            infidelity: mean_opt(&|r| r.infidelity),
            continuity: mean(&|r| r.continuity),
            n_samples: reports.iter().map(|r| r.n_samples).sum(),
        })
    }
}
