mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde_json::{json, Value};

use vap::ingest::{uniform_sample, IndexSet, VideoClip};
use vap::latents::{
    encode_clip, EncoderConfig, LatentBlob, LatentFrame, LatentSequence, LatentShape, LatentSource,
};
use vap::pipeline::Engine;
use vap::prior::{
    remote_predict, HealthResponse, LatentsResponse, PredictBody, PredictorConfig, PredictorKind,
    PredictorRequest, PriorError, RemoteClient, DEFAULT_REMOTE_TIMEOUT,
};
use vap::select::Metric;
use vap::synthworld::{generate_video, WorldConfig};
use vap::transport::RetryPolicy;

fn fixture(name: &str) -> Value {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[derive(Clone)]
struct Echo {
    fingerprint: String,
    /// Latents added to (or, if negative, removed from) every reply.
    length_skew: isize,
    max_target_length: usize,
    predict_calls: Arc<AtomicUsize>,
}

impl Echo {
    fn new(fingerprint: &str) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            length_skew: 0,
            max_target_length: 4096,
            predict_calls: Arc::new(AtomicUsize::new(0)),
        }
    }
}

/// Each output index copies the latest anchor at or before it (the first
/// anchor before the first index).
fn hold(body: &PredictBody, len: usize) -> LatentBlob {
    let anchors = body.initial_latents.decode().unwrap();
    let out: Vec<LatentFrame> = (0..len)
        .map(|i| {
            let pos = body
                .initial_indices
                .iter()
                .rposition(|&a| a <= i)
                .unwrap_or(0);
            anchors[pos].clone()
        })
        .collect();
    LatentBlob::from_latents(&out)
}

async fn health(State(s): State<Echo>) -> Json<Value> {
    Json(json!({"latent_fingerprint": s.fingerprint, "max_target_length": s.max_target_length}))
}

async fn predict(State(s): State<Echo>, Json(body): Json<PredictBody>) -> Json<LatentsResponse> {
    s.predict_calls.fetch_add(1, Ordering::SeqCst);
    let len = (body.target_length as isize + s.length_skew) as usize;
    Json(LatentsResponse {
        latents: hold(&body, len),
    })
}

async fn encode(Json(body): Json<Value>) -> Result<Json<LatentsResponse>, StatusCode> {
    let frames = body["frames"].as_array().ok_or(StatusCode::BAD_REQUEST)?;
    let images = frames
        .iter()
        .map(|f| {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(f.as_str().unwrap_or_default())
                .map_err(|_| StatusCode::BAD_REQUEST)?;
            Ok(image::load_from_memory(&bytes)
                .map_err(|_| StatusCode::BAD_REQUEST)?
                .to_rgb8())
        })
        .collect::<Result<Vec<_>, StatusCode>>()?;
    let clip = VideoClip::from_images("enc", 0.0, images).map_err(|_| StatusCode::BAD_REQUEST)?;
    let seq = encode_clip(&clip, &EncoderConfig::default()).map_err(|_| StatusCode::BAD_REQUEST)?;
    Ok(Json(LatentsResponse {
        latents: LatentBlob::from_sequence(&seq),
    }))
}

fn echo_server(state: Echo) -> String {
    common::serve(
        Router::new()
            .route("/health", get(health))
            .route("/predict", post(predict))
            .route("/encode", post(encode))
            .with_state(state),
    )
}

fn tiny(values: &[f32], index: usize) -> LatentFrame {
    LatentFrame::new(
        LatentShape::new(1, 1, values.len()),
        values.to_vec(),
        LatentSource::Real(index),
    )
    .unwrap()
}

fn request(fingerprint: &str, anchors: &[usize], values: &[&[f32]], t: usize) -> PredictorRequest {
    PredictorRequest {
        video_id: "v".into(),
        initial_indices: IndexSet::new(anchors.to_vec(), t).unwrap(),
        initial_latents: LatentSequence::new(
            "v",
            fingerprint,
            values
                .iter()
                .zip(anchors)
                .map(|(v, &i)| tiny(v, i))
                .collect(),
        )
        .unwrap(),
        question: "What happens to the red circle?".into(),
        answers: vec!["It vanishes".into(), "It turns blue".into()],
        generation_prompt: "predict the rest".into(),
        target_length: t,
    }
}

fn fast_client(endpoint: &str) -> RemoteClient {
    RemoteClient::with_policy(
        endpoint,
        RetryPolicy::new(3, Duration::from_millis(20)),
        DEFAULT_REMOTE_TIMEOUT,
        4,
    )
}

#[test]
fn echo_hold_single_anchor() {
    let url = echo_server(Echo::new("fp"));
    let req = request("fp", &[0], &[&[1.5, -2.0]], 4);
    let out = remote_predict(&req, &url).unwrap();
    assert_eq!(out.len(), 4);
    for l in out.latents() {
        assert_eq!(l.data(), &[1.5, -2.0]);
    }
    assert_eq!(out.encoder_fingerprint, "fp");
}

#[test]
fn wrong_length_is_a_protocol_error() {
    for skew in [-1, 1] {
        let mut state = Echo::new("fp");
        state.length_skew = skew;
        let url = echo_server(state);
        let req = request("fp", &[0, 2], &[&[1.0], &[2.0]], 6);
        assert!(matches!(
            remote_predict(&req, &url),
            Err(PriorError::RemoteProtocolError(_))
        ));
    }
}

#[test]
fn unreachable_endpoint_gives_up_after_three_attempts() {
    let client = fast_client(&common::dead_endpoint());
    let start = Instant::now();
    let err = client
        .predict(&request("fp", &[0], &[&[1.0]], 2))
        .unwrap_err();
    assert!(
        matches!(err, PriorError::RemoteUnavailable { attempts: 3, .. }),
        "{err}"
    );
    // Backoff 0 + 20 ms + 40 ms.
    assert!(start.elapsed() >= Duration::from_millis(60));
}

#[test]
fn server_errors_are_retried_three_times() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let url = common::serve(Router::new().route(
        "/health",
        get(move || {
            let counter = counter.clone();
            async move {
                counter.fetch_add(1, Ordering::SeqCst);
                StatusCode::SERVICE_UNAVAILABLE
            }
        }),
    ));
    let err = fast_client(&url).health().unwrap_err();
    assert!(matches!(
        err,
        PriorError::RemoteUnavailable { attempts: 3, .. }
    ));
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn fingerprint_mismatch_is_rejected_before_predict() {
    let state = Echo::new("server-space");
    let calls = state.predict_calls.clone();
    let url = echo_server(state);
    let err = remote_predict(&request("client-space", &[0], &[&[1.0]], 2), &url).unwrap_err();
    assert!(matches!(err, PriorError::FingerprintMismatch { .. }));
    assert_eq!(calls.load(Ordering::SeqCst), 0);
}

#[test]
fn target_longer_than_server_maximum_is_rejected() {
    let mut state = Echo::new("fp");
    state.max_target_length = 3;
    let url = echo_server(state);
    let err = remote_predict(&request("fp", &[0], &[&[1.0]], 4), &url).unwrap_err();
    assert!(matches!(err, PriorError::InvalidRequest(_)));
}

#[test]
fn request_body_matches_contract_fixture() {
    let req = request("contract-v1", &[0, 2], &[&[0.5, -1.25], &[2.0, 3.0]], 4);
    let body = serde_json::to_value(PredictBody::from_request(&req)).unwrap();
    assert_eq!(body, fixture("predict_request.json"));
    let health: HealthResponse = serde_json::from_value(fixture("health.json")).unwrap();
    assert_eq!(health.latent_fingerprint, "contract-v1");
    assert_eq!(health.max_target_length, 64);
}

#[test]
fn fixture_server_round_trip() {
    let respond = |name: &'static str| {
        common::serve(
            Router::new()
                .route("/health", get(|| async { Json(fixture("health.json")) }))
                .route("/predict", post(move || async move { Json(fixture(name)) })),
        )
    };
    let req = request("contract-v1", &[0, 2], &[&[0.5, -1.25], &[2.0, 3.0]], 4);
    let out = remote_predict(&req, &respond("predict_response.json")).unwrap();
    let values: Vec<Vec<f32>> = out.latents().iter().map(|l| l.data().to_vec()).collect();
    assert_eq!(
        values,
        vec![
            vec![0.5, -1.25],
            vec![0.5, -1.25],
            vec![2.0, 3.0],
            vec![2.0, 3.0]
        ]
    );

    let err = remote_predict(&req, &respond("predict_response_bad_crc.json")).unwrap_err();
    assert!(matches!(err, PriorError::RemoteProtocolError(_)), "{err}");
}

fn small_video() -> VideoClip {
    let cfg = WorldConfig {
        frames: 40,
        width: 64,
        height: 48,
        anomaly_count: 2,
        seed: 5,
        ..WorldConfig::default()
    };
    generate_video(&cfg, "small").unwrap().clip
}

#[test]
fn engine_with_echo_server_matches_builtin_hold() {
    let fp = EncoderConfig::default().fingerprint();
    let state = Echo::new(&fp);
    let calls = state.predict_calls.clone();
    let url = echo_server(state);
    let clip = small_video();
    let anchors = uniform_sample(clip.len(), 8).unwrap();
    let local = Engine::builtin(PredictorKind::Hold)
        .profile(&clip, &anchors, None, Metric::Cosine)
        .unwrap();
    for remote_encode in [false, true] {
        let engine = Engine::new(
            EncoderConfig::default(),
            &PredictorConfig::remote(url.clone()),
            Duration::from_millis(10),
            remote_encode,
            None,
        )
        .unwrap();
        let remote = engine
            .profile(&clip, &anchors, None, Metric::Cosine)
            .unwrap();
        assert_eq!(remote.scores, local.scores, "remote_encode={remote_encode}");
    }
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}
