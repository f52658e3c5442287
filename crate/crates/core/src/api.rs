//! Request and response bodies of the HTTP/JSON service. Binary payloads
//! (image files, DXSM/DXAM records, PNGs) travel as standard base64 strings.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::CorpusReport;
use crate::pipeline::MethodSpec;

pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    #[serde(with = "b64")]
    pub image: Vec<u8>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskPayload {
    /// Kernel written as `kxXky`, e.g. `15x3`.
    pub kernel: String,
    pub width: usize,
    pub height: usize,
    pub n_bg: u32,
    pub n_fg: u32,
    #[serde(with = "b64")]
    pub dxsm: Vec<u8>,
    #[serde(with = "b64")]
    pub png: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub empty_foreground: bool,
    pub masks: Vec<MaskPayload>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainRequest {
    #[serde(with = "b64")]
    pub image: Vec<u8>,
    pub config: RunConfig,
    /// Overrides the methods implied by `config.mode`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<MethodSpec>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapPayload {
    pub method: String,
    pub width: usize,
    pub height: usize,
    pub target_class: usize,
    #[serde(with = "b64")]
    pub dxam: Vec<u8>,
    #[serde(with = "b64")]
    pub heatmap_png: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub target_class: usize,
    pub scores: Vec<f64>,
    pub maps: Vec<MapPayload>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplePayload {
    pub name: String,
    #[serde(with = "b64")]
    pub image: Vec<u8>,
    #[serde(default)]
    pub true_class: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub samples: Vec<SamplePayload>,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<MethodSpec>>,
    /// Worker threads for the corpus run; 0 lets the server decide.
    #[serde(default)]
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMapPayload {
    pub sample: usize,
    pub method: String,
    #[serde(with = "b64")]
    pub dxam: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub report: CorpusReport,
    pub maps: Vec<SampleMapPayload>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadRequest,
    ModelProtocol,
    Model,
    Internal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
    /// Byte offset in the model's reply stream, for protocol errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}
