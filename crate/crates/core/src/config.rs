//! Run configuration (TOML) and corpus manifests.
//!
//! A complete configuration file looks like this; every section is optional
//! and falls back to the defaults shown.
//!
//! ```toml
//! seed = 0
//! mode = "both"                 # fg | fgbg | both
//! methods = ["docxplain_fgbg", "occlusion", "random"]   # compare only
//! # target_class = 0            # default: argmax of the model
//! # out = "runs/example"
//! # manifest = "corpus.csv"
//!
//! [model]
//! backend = "synthetic"
//! width = 224
//! height = 224
//! classifier = { kind = "region_density", region = { x = 0, y = 0, width = 112, height = 112 } }
//!
//! [explain.segmentation]
//! working_size = 1024
//! open_kernel = [5, 5]
//! kernels = [
//!   { fg_kernel = [5, 5] },
//!   { fg_kernel = [3, 15] },
//!   { fg_kernel = [15, 3] },
//! ]
//!
//! [explain.occlusion]           # default: 16/8 up to 224 px inputs, 32/16 above
//! patch = 16
//! stride = 8
//! fill = 0.5
//!
//! [metrics]
//! aopc = { patch = 8, steps = 20 }
//! sensitivity = { radius = 0.02, n_samples = 10 }
//! infidelity = { patch = 8, n_samples = 128 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelSpec;
use crate::pipeline::{methods_for_mode, ExplainSettings, MethodSpec, MetricSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<MethodSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub explain: ExplainSettings,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: "both".into(),
            methods: Vec::new(),
            target_class: None,
            out: None,
            manifest: None,
            model: None,
            explain: ExplainSettings::default(),
            metrics: MetricSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        methods_for_mode(&self.mode).map_err(ConfigError::Invalid)?;
        if self.explain.segmentation.kernels.is_empty() {
            return Err(ConfigError::Invalid("at least one kernel is required".into()));
        }
        if self.explain.segmentation.working_size == 0 {
            return Err(ConfigError::Invalid("working_size must be positive".into()));
        }
        let aopc = self.metrics.aopc;
        if aopc.patch == 0 || aopc.steps == 0 {
            return Err(ConfigError::Invalid("aopc patch and steps must be positive".into()));
        }
        if self.metrics.sensitivity.n_samples > 0 && self.metrics.sensitivity.radius <= 0.0 {
            return Err(ConfigError::Invalid("sensitivity radius must be positive".into()));
        }
        Ok(())
    }

    /// Methods evaluated by `evaluate`: the DocXplain variants selected by `mode`.
    pub fn mode_methods(&self) -> Result<Vec<MethodSpec>, ConfigError> {
        methods_for_mode(&self.mode).map_err(ConfigError::Invalid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub true_class: Option<usize>,
}

/// Corpus list: one `path[,class]` record per line. Blank lines and lines
/// starting with `#` are ignored; relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| format!("record {}: {e}", i + 1))?;
            let path = record.get(0).unwrap_or("");
            if path.is_empty() {
                continue;
            }
            if record.len() > 2 {
                return Err(format!("record {}: expected path[,class]", i + 1));
            }
            let true_class = match record.get(1).filter(|c| !c.is_empty()) {
                Some(c) => Some(
                    c.parse::<usize>()
                        .map_err(|e| format!("record {}: class {c:?}: {e}", i + 1))?,
                ),
                None => None,
            };
            let path = Path::new(path);
            entries.push(ManifestEntry {
                path: if path.is_absolute() {
                    path.to_owned()
                } else {
                    base_dir.join(path)
                },
                true_class,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|message| ConfigError::Manifest {
            path: path.to_owned(),
            message,
        })
    }
}
