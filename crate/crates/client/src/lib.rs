//! Thin async client for the DocXplain service, plus the output helpers used
//! by the `docxplain` command-line tool.

pub mod output;

use docxplain_core::api::{
    ErrorBody, ErrorResponse, EvaluateRequest, EvaluateResponse, ExplainRequest, ExplainResponse,
    SegmentRequest, SegmentResponse,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server replied {status}: {}", .error.message)]
    Api { status: u16, error: ErrorBody },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn health(&self) -> Result<String, ClientError> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send().await?;
        Ok(resp.error_for_status()?.text().await?)
    }

    async fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ClientError> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        match resp.json::<ErrorResponse>().await {
            Ok(e) => Err(ClientError::Api {
                status: status.as_u16(),
                error: e.error,
            }),
            Err(e) => Err(ClientError::Transport(e)),
        }
    }

    pub async fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, ClientError> {
        self.post("/v1/segment", req).await
    }

    pub async fn explain(&self, req: &ExplainRequest) -> Result<ExplainResponse, ClientError> {
        self.post("/v1/explain", req).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, ClientError> {
        self.post("/v1/evaluate", req).await
    }
}
