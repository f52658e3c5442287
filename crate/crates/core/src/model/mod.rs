//! Black-box classifiers: `image batch -> per-class scores`.

pub mod protocol;
mod subprocess;
mod synthetic;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use protocol::ProtocolError;
pub use subprocess::SubprocessClassifier;
pub use synthetic::{Rect, SyntheticClassifier, SyntheticKind, WeightedRegion};

use crate::imaging::RasterImage;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match model input {expected:?} (w, h, c)")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("invalid synthetic model geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("model backend failure: {0}")]
    Backend(String),
    #[error("target class {target} out of range for {n_classes} classes")]
    TargetOutOfRange { target: usize, n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Synthetic,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub n_classes: usize,
    pub max_batch: usize,
    pub backend: Backend,
}

/// Per-class confidence values for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    /// Index of the highest score, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A scoring backend. Implementations must be deterministic and receive at
/// most `info().max_batch` images per call, all of the declared shape.
pub trait Classifier: Send + Sync {
    fn info(&self) -> ModelInfo;
    fn score(&self, images: &[RasterImage]) -> Result<Vec<ScoreVector>, ModelError>;
}

const CACHE_CAPACITY: usize = 1 << 16;

/// Shape-checked, batching front end over a [`Classifier`], with an optional
/// score cache keyed by image content hash.
pub struct ClassifierHandle {
    id: String,
    info: ModelInfo,
    inner: Box<dyn Classifier>,
    cache: Option<Mutex<HashMap<[u8; 32], ScoreVector>>>,
}

impl std::fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("id", &self.id)
            .field("info", &self.info)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

fn content_hash(img: &RasterImage) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in [img.width(), img.height(), img.channels()] {
        h.update((d as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

impl ClassifierHandle {
    pub fn new(id: impl Into<String>, inner: impl Classifier + 'static, cache: bool) -> Self {
        let info = inner.info();
        Self {
            id: id.into(),
            info,
            inner: Box::new(inner),
            cache: cache.then(|| Mutex::new(HashMap::new())),
        }
    }

    pub fn synthetic(inner: SyntheticClassifier) -> Self {
        Self::new("synthetic", inner, false)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.info.input_width, self.info.input_height)
    }

    pub fn check_shape(&self, img: &RasterImage) -> Result<(), ModelError> {
        let expected = (
            self.info.input_width,
            self.info.input_height,
            self.info.input_channels,
        );
        let got = (img.width(), img.height(), img.channels());
        if expected != got {
            return Err(ModelError::ShapeMismatch { expected, got });
        }
        Ok(())
    }

    pub fn check_target(&self, target: usize) -> Result<(), ModelError> {
        if target >= self.info.n_classes {
            return Err(ModelError::TargetOutOfRange {
                target,
                n_classes: self.info.n_classes,
            });
        }
        Ok(())
    }

    /// Scores any number of images, chunked to `max_batch`. Output order
    /// matches input order.
    pub fn score_batch(&self, images: &[RasterImage]) -> Result<Vec<ScoreVector>, ModelError> {
        for img in images {
            self.check_shape(img)?;
        }
        let Some(cache) = &self.cache else {
            return self.score_uncached(images);
        };
        let keys: Vec<[u8; 32]> = images.iter().map(content_hash).collect();
        let mut out: Vec<Option<ScoreVector>> = {
            let map = cache.lock().unwrap_or_else(|p| p.into_inner());
            keys.iter().map(|k| map.get(k).cloned()).collect()
        };
        let missing: Vec<usize> = (0..images.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<RasterImage> = missing.iter().map(|&i| images[i].clone()).collect();
            let scored = self.score_uncached(&batch)?;
            let mut map = cache.lock().unwrap_or_else(|p| p.into_inner());
            if map.len() + scored.len() > CACHE_CAPACITY {
                map.clear();
            }
            for (&i, s) in missing.iter().zip(scored) {
                map.insert(keys[i], s.clone());
                out[i] = Some(s);
            }
        }
        Ok(out.into_iter().map(|s| s.expect("filled")).collect())
    }

    fn score_uncached(&self, images: &[RasterImage]) -> Result<Vec<ScoreVector>, ModelError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.info.max_batch) {
            let scores = self.inner.score(chunk)?;
            if scores.len() != chunk.len() {
                return Err(ModelError::Backend(format!(
                    "backend returned {} score vectors for {} images",
                    scores.len(),
                    chunk.len()
                )));
            }
            for s in &scores {
                if s.len() != self.info.n_classes || s.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::Backend(format!(
                        "malformed score vector of length {}",
                        s.len()
                    )));
                }
            }
            out.extend(scores);
        }
        Ok(out)
    }

    pub fn score(&self, img: &RasterImage) -> Result<ScoreVector, ModelError> {
        Ok(self.score_batch(std::slice::from_ref(img))?.remove(0))
    }

    /// Target scores of `count` perturbed copies of `img`, built in reusable
    /// batch buffers. `perturb(k, buf)` turns a clean copy into perturbation
    /// `k`; `restore(k, buf, img)` must undo it afterwards. Batches are cut
    /// below `max_batch` when the copies would exceed [`SCRATCH_BYTES`].
    pub fn score_perturbations(
        &self,
        img: &RasterImage,
        target: usize,
        count: usize,
        mut perturb: impl FnMut(usize, &mut RasterImage),
        mut restore: impl FnMut(usize, &mut RasterImage, &RasterImage),
    ) -> Result<Vec<f64>, ModelError> {
        let per_image = (img.data().len() * std::mem::size_of::<f32>()).max(1);
        let slots = self.info.max_batch.min(count).min((SCRATCH_BYTES / per_image).max(1));
        let mut buffers = vec![img.clone(); slots];
        let mut out = Vec::with_capacity(count);
        let mut start = 0;
        while start < count {
            let n = slots.min(count - start);
            for (i, buf) in buffers[..n].iter_mut().enumerate() {
                perturb(start + i, buf);
            }
            out.extend(self.target_scores(&buffers[..n], target)?);
            for (i, buf) in buffers[..n].iter_mut().enumerate() {
                restore(start + i, buf, img);
            }
            start += n;
        }
        Ok(out)
    }

    /// Target-class component of each image's scores.
    pub fn target_scores(&self, images: &[RasterImage], target: usize) -> Result<Vec<f64>, ModelError> {
        self.check_target(target)?;
        Ok(self.score_batch(images)?.into_iter().map(|s| s[target]).collect())
    }
}

/// Memory budget for the perturbed copies held by one scoring batch.
pub const SCRATCH_BYTES: usize = 2 << 20;

/// Serializable description of a model, used in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ModelSpec {
    Synthetic {
        width: usize,
        height: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default = "default_max_batch")]
        max_batch: usize,
        classifier: SyntheticKind,
    },
    Subprocess {
        command: Vec<String>,
        width: usize,
        height: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default = "two")]
        n_classes: usize,
        #[serde(default = "default_max_batch")]
        max_batch: usize,
        #[serde(default = "yes")]
        cache: bool,
    },
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

fn default_max_batch() -> usize {
    64
}

impl ModelSpec {
    /// Stable identifier: the canonical JSON encoding of the spec.
    pub fn id(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    pub fn instantiate(&self) -> Result<Arc<ClassifierHandle>, ModelError> {
        let handle = match self {
            ModelSpec::Synthetic {
                width,
                height,
                channels,
                max_batch,
                classifier,
            } => ClassifierHandle::new(
                self.id(),
                SyntheticClassifier::new(*width, *height, *channels, *max_batch, classifier.clone())?,
                false,
            ),
            ModelSpec::Subprocess {
                command,
                width,
                height,
                channels,
                n_classes,
                max_batch,
                cache,
            } => ClassifierHandle::new(
                self.id(),
                SubprocessClassifier::spawn(command, *width, *height, *channels, *n_classes, *max_batch)?,
                *cache,
            ),
        };
        Ok(Arc::new(handle))
    }

    /// Parses the `--model` shorthand:
    ///
    /// * `constant[:p]` — scores `(p, 1-p)`, default 0.5
    /// * `region-density[:x,y,w,h]` — default top-left quadrant
    /// * `exec:<program> [args...]` — subprocess backend
    ///
    /// Synthetic shorthands use a 224x224 single-channel input.
    pub fn parse_shorthand(s: &str) -> Result<ModelSpec, ModelError> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let size = 224;
        let synthetic = |classifier| ModelSpec::Synthetic {
            width: size,
            height: size,
            channels: 1,
            max_batch: default_max_batch(),
            classifier,
        };
        match kind {
            "constant" => {
                let p = if arg.is_empty() {
                    0.5
                } else {
                    arg.parse::<f64>()
                        .map_err(|e| ModelError::InvalidSpec(format!("constant value {arg:?}: {e}")))?
                };
                Ok(synthetic(SyntheticKind::Constant { scores: vec![p, 1.0 - p] }))
            }
            "region-density" | "region_density" => {
                let region = if arg.is_empty() {
                    Rect::new(0, 0, size / 2, size / 2)
                } else {
                    let v: Vec<usize> = arg
                        .split(',')
                        .map(|t| t.trim().parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| ModelError::InvalidSpec(format!("region {arg:?}: {e}")))?;
                    let [x, y, w, h] = v[..] else {
                        return Err(ModelError::InvalidSpec(format!("region {arg:?} needs x,y,w,h")));
                    };
                    Rect::new(x, y, w, h)
                };
                Ok(synthetic(SyntheticKind::RegionDensity { region }))
            }
            "exec" => {
                let command: Vec<String> = arg.split_whitespace().map(str::to_owned).collect();
                if command.is_empty() {
                    return Err(ModelError::InvalidSpec("exec: needs a program".into()));
                }
                Ok(ModelSpec::Subprocess {
                    command,
                    width: size,
                    height: size,
                    channels: 1,
                    n_classes: 2,
                    max_batch: default_max_batch(),
                    cache: true,
                })
            }
            other => Err(ModelError::InvalidSpec(format!("unknown model shorthand {other:?}"))),
        }
    }
}
