use axum::body::Body;
use axum::http::{Request, StatusCode};
use docxplain_core::api::{
    ErrorKind, ErrorResponse, EvaluateRequest, EvaluateResponse, ExplainRequest, ExplainResponse,
    SamplePayload, SegmentRequest, SegmentResponse,
};
use docxplain_core::config::RunConfig;
use docxplain_core::formats::{decode_map, decode_mask};
use docxplain_core::imaging::RasterImage;
use docxplain_core::model::ModelSpec;
use docxplain_core::synth::document_page;
use docxplain_server::{router, AppState};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

async fn post<T: Serialize, R: DeserializeOwned>(path: &str, body: &T) -> (StatusCode, Result<R, ErrorResponse>) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    let resp = router(AppState::new()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    if status.is_success() {
        (status, Ok(serde_json::from_slice(&bytes).unwrap()))
    } else {
        (status, Err(serde_json::from_slice(&bytes).unwrap()))
    }
}

fn config(model: &str) -> RunConfig {
    let mut cfg = RunConfig {
        model: Some(ModelSpec::parse_shorthand(model).unwrap()),
        ..RunConfig::default()
    };
    cfg.metrics.sensitivity.n_samples = 0;
    cfg.metrics.infidelity.n_samples = 16;
    cfg.metrics.aopc.steps = 8;
    cfg
}

#[tokio::test]
async fn healthz_answers() {
    let resp = router(AppState::new())
        .oneshot(Request::get("/healthz").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn segment_returns_one_mask_per_kernel() {
    let req = SegmentRequest {
        image: document_page(256, 3).to_png(),
        config: RunConfig::default(),
    };
    let (status, resp) = post::<_, SegmentResponse>("/v1/segment", &req).await;
    assert_eq!(status, StatusCode::OK);
    let resp = resp.unwrap();
    let kernels: Vec<_> = resp.masks.iter().map(|m| m.kernel.as_str()).collect();
    assert_eq!(kernels, ["5x5", "3x15", "15x3"]);
    assert!(!resp.empty_foreground);
    for m in &resp.masks {
        let mask = decode_mask(&m.dxsm).unwrap();
        assert_eq!((mask.width(), mask.height()), (224, 224));
        assert_eq!((mask.n_bg(), mask.n_fg()), (m.n_bg, m.n_fg));
        assert!(RasterImage::decode(&m.png).is_ok());
    }
}

#[tokio::test]
async fn blank_page_reports_empty_foreground() {
    let req = SegmentRequest {
        image: RasterImage::filled(100, 80, 1, 1.0).to_png(),
        config: RunConfig::default(),
    };
    let resp = post::<_, SegmentResponse>("/v1/segment", &req).await.1.unwrap();
    assert!(resp.empty_foreground);
    assert!(resp.masks.iter().all(|m| m.n_fg == 0 && m.n_bg > 0));
}

#[tokio::test]
async fn undecodable_image_is_a_bad_request() {
    let req = SegmentRequest {
        image: b"not an image".to_vec(),
        config: RunConfig::default(),
    };
    let (status, resp) = post::<_, SegmentResponse>("/v1/segment", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(resp.unwrap_err().error.kind, ErrorKind::BadRequest);
}

#[tokio::test]
async fn explain_both_modes_share_shape_and_target() {
    let req = ExplainRequest {
        image: document_page(224, 5).to_png(),
        config: config("region-density"),
        methods: None,
    };
    let resp = post::<_, ExplainResponse>("/v1/explain", &req).await.1.unwrap();
    let labels: Vec<_> = resp.maps.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(labels, ["docxplain_fg", "docxplain_fgbg"]);
    assert_eq!(resp.scores.len(), 2);
    for m in &resp.maps {
        let map = decode_map(&m.dxam).unwrap();
        assert_eq!((map.width, map.height, map.target_class), (224, 224, resp.target_class));
    }
}

#[tokio::test]
async fn constant_model_explains_to_zero() {
    let mut cfg = config("constant:0.7");
    cfg.mode = "fgbg".into();
    let req = ExplainRequest {
        image: document_page(224, 1).to_png(),
        config: cfg,
        methods: None,
    };
    let resp = post::<_, ExplainResponse>("/v1/explain", &req).await.1.unwrap();
    assert_eq!(resp.target_class, 0);
    let map = decode_map(&resp.maps[0].dxam).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[tokio::test]
async fn explain_rejects_missing_model_and_bad_target() {
    let req = ExplainRequest {
        image: document_page(224, 1).to_png(),
        config: RunConfig::default(),
        methods: None,
    };
    let (status, _) = post::<_, ExplainResponse>("/v1/explain", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut cfg = config("region-density");
    cfg.target_class = Some(7);
    let req = ExplainRequest { config: cfg, ..req };
    let (status, resp) = post::<_, ExplainResponse>("/v1/explain", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(resp.unwrap_err().error.message.contains("out of range"));
}

#[tokio::test]
async fn evaluate_isolates_corrupt_samples() {
    let mut samples: Vec<SamplePayload> = (0..3)
        .map(|i| SamplePayload {
            name: format!("page{i}"),
            image: document_page(224, i).to_png(),
            true_class: None,
        })
        .collect();
    samples[1].image = b"garbage".to_vec();
    let req = EvaluateRequest {
        samples,
        config: config("region-density"),
        methods: Some(vec!["docxplain_fg".parse().unwrap(), "random".parse().unwrap()]),
        workers: 1,
    };
    let resp = post::<_, EvaluateResponse>("/v1/evaluate", &req).await.1.unwrap();
    assert_eq!(resp.report.n_failed, 1);
    assert_eq!(resp.report.n_evaluated, 2);
    assert_eq!(resp.maps.len(), 4);
    assert!(resp.maps.iter().all(|m| m.sample != 1));
    assert_eq!(resp.report.aggregates.len(), 2);
}

#[tokio::test]
async fn evaluate_rejects_empty_corpus_and_duplicate_methods() {
    let req = EvaluateRequest {
        samples: Vec::new(),
        config: config("region-density"),
        methods: None,
        workers: 0,
    };
    assert_eq!(post::<_, EvaluateResponse>("/v1/evaluate", &req).await.0, StatusCode::BAD_REQUEST);

    let req = EvaluateRequest {
        samples: vec![SamplePayload {
            name: "a".into(),
            image: document_page(224, 0).to_png(),
            true_class: None,
        }],
        methods: Some(vec!["random".parse().unwrap(), "random".parse().unwrap()]),
        ..req
    };
    let (status, resp) = post::<_, EvaluateResponse>("/v1/evaluate", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(resp.unwrap_err().error.message.contains("twice"));
}

#[tokio::test]
async fn missing_model_program_is_a_gateway_error() {
    let req = ExplainRequest {
        image: document_page(224, 1).to_png(),
        config: config("exec:/nonexistent/model-binary"),
        methods: None,
    };
    let (status, resp) = post::<_, ExplainResponse>("/v1/explain", &req).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{:?}", resp.unwrap_err());
}
