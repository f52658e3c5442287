//! Analytic two-class classifiers with closed-form attributions.
//!
//! All of them read the *darkness* of a pixel, `1 - mean channel intensity`,
//! which equals the black-pixel indicator on binary pages. Class 0 carries the
//! modeled score and class 1 its complement.

use serde::{Deserialize, Serialize};

use super::{Backend, Classifier, ModelError, ModelInfo, ScoreVector};
use crate::imaging::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedRegion {
    pub region: Rect,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    Constant { scores: Vec<f64> },
    RegionDensity { region: Rect },
    MultiRegionLinear {
        regions: Vec<WeightedRegion>,
        #[serde(default = "yes")]
        clamp: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct SyntheticClassifier {
    width: usize,
    height: usize,
    channels: usize,
    max_batch: usize,
    kind: SyntheticKind,
}

impl SyntheticClassifier {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        max_batch: usize,
        kind: SyntheticKind,
    ) -> Result<Self, ModelError> {
        let invalid = |m: String| Err(ModelError::InvalidGeometry(m));
        if width == 0 || height == 0 {
            return invalid(format!("input size {width}x{height}"));
        }
        if channels != 1 && channels != 3 {
            return invalid(format!("{channels} input channels"));
        }
        if max_batch == 0 {
            return invalid("max_batch must be at least 1".into());
        }
        let in_bounds = |r: &Rect| r.area() > 0 && r.x + r.width <= width && r.y + r.height <= height;
        match &kind {
            SyntheticKind::Constant { scores } => {
                if scores.len() < 2 || scores.iter().any(|s| !s.is_finite()) {
                    return invalid("constant scores need at least 2 finite classes".into());
                }
            }
            SyntheticKind::RegionDensity { region } => {
                if !in_bounds(region) {
                    return invalid(format!("region {region:?} outside {width}x{height}"));
                }
            }
            SyntheticKind::MultiRegionLinear { regions, .. } => {
                if regions.is_empty() {
                    return invalid("at least one weighted region is required".into());
                }
                for (i, r) in regions.iter().enumerate() {
                    if !in_bounds(&r.region) {
                        return invalid(format!("region {:?} outside {width}x{height}", r.region));
                    }
                    if !r.weight.is_finite() {
                        return invalid(format!("weight {} is not finite", r.weight));
                    }
                    if regions[..i].iter().any(|o| o.region.overlaps(&r.region)) {
                        return invalid(format!("region {:?} overlaps another region", r.region));
                    }
                }
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            max_batch,
            kind,
        })
    }

    /// `constant(p)` scores `(p, 1 - p)` everywhere.
    pub fn constant(width: usize, height: usize, p: f64) -> Result<Self, ModelError> {
        Self::new(width, height, 1, 64, SyntheticKind::Constant { scores: vec![p, 1.0 - p] })
    }

    pub fn region_density(width: usize, height: usize, region: Rect) -> Result<Self, ModelError> {
        Self::new(width, height, 1, 64, SyntheticKind::RegionDensity { region })
    }

    pub fn multi_region_linear(
        width: usize,
        height: usize,
        regions: Vec<WeightedRegion>,
        clamp: bool,
    ) -> Result<Self, ModelError> {
        Self::new(
            width,
            height,
            1,
            64,
            SyntheticKind::MultiRegionLinear { regions, clamp },
        )
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn kind(&self) -> &SyntheticKind {
        &self.kind
    }

    /// Weight of each pixel's darkness in the class-0 score, ignoring clamping:
    /// `w_r / |R_r|` inside region `r`, zero elsewhere.
    pub fn darkness_weights(&self) -> Vec<f64> {
        let mut weights = vec![0.0; self.width * self.height];
        let mut fill = |r: &Rect, w: f64| {
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    weights[y * self.width + x] = w / r.area() as f64;
                }
            }
        };
        match &self.kind {
            SyntheticKind::Constant { .. } => {}
            SyntheticKind::RegionDensity { region } => fill(region, 1.0),
            SyntheticKind::MultiRegionLinear { regions, .. } => {
                for r in regions {
                    fill(&r.region, r.weight);
                }
            }
        }
        weights
    }

    /// Mean darkness over `r`. Sums raw samples row by row in four lanes;
    /// the channel mean is applied once at the end.
    fn density(&self, img: &RasterImage, r: &Rect) -> f64 {
        let c = img.channels();
        let data = img.data();
        let mut lanes = [0.0f64; 4];
        for y in r.y..r.y + r.height {
            let start = (y * self.width + r.x) * c;
            let row = &data[start..start + r.width * c];
            let mut chunks = row.chunks_exact(4);
            for ch in &mut chunks {
                for (acc, &v) in lanes.iter_mut().zip(ch) {
                    *acc += v as f64;
                }
            }
            for (acc, &v) in lanes.iter_mut().zip(chunks.remainder()) {
                *acc += v as f64;
            }
        }
        let light = lanes.iter().sum::<f64>() / c as f64;
        let area = r.area() as f64;
        (area - light) / area
    }

    fn score_one(&self, img: &RasterImage) -> ScoreVector {
        let primary = match &self.kind {
            SyntheticKind::Constant { scores } => return ScoreVector(scores.clone()),
            SyntheticKind::RegionDensity { region } => self.density(img, region),
            SyntheticKind::MultiRegionLinear { regions, clamp } => {
                let s: f64 = regions
                    .iter()
                    .map(|r| r.weight * self.density(img, &r.region))
                    .sum();
                if *clamp {
                    s.clamp(0.0, 1.0)
                } else {
                    s
                }
            }
        };
        ScoreVector(vec![primary, 1.0 - primary])
    }
}

impl Classifier for SyntheticClassifier {
    fn info(&self) -> ModelInfo {
        let n_classes = match &self.kind {
            SyntheticKind::Constant { scores } => scores.len(),
            _ => 2,
        };
        ModelInfo {
            input_width: self.width,
            input_height: self.height,
            input_channels: self.channels,
            n_classes,
            max_batch: self.max_batch,
            backend: Backend::Synthetic,
        }
    }

    fn score(&self, images: &[RasterImage]) -> Result<Vec<ScoreVector>, ModelError> {
        Ok(images.iter().map(|img| self.score_one(img)).collect())
    }
}
