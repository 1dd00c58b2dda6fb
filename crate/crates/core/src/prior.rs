//! The prior-knowledge model: predicts a latent for every frame index from a
//! handful of anchor latents, either with a built-in interpolator or through a
//! remote generation service.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::ingest::{Frame, IndexSet};
use crate::latents::{
    short_hash, LatentBlob, LatentError, LatentFrame, LatentSequence, LatentSource,
};
use crate::transport::{self, RetryPolicy, Semaphore};

pub const DEFAULT_SSIM_THRESHOLD: f64 = 0.90;
pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_REMOTE_IN_FLIGHT: usize = 4;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("remote predictor unavailable after {attempts} attempts: {reason}")]
    RemoteUnavailable { attempts: u32, reason: String },
    #[error("remote predictor protocol error: {0}")]
    RemoteProtocolError(String),
    #[error("latent space mismatch: server {server}, request {request}")]
    FingerprintMismatch { server: String, request: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid predictor request: {0}")]
    InvalidRequest(String),
    #[error("invalid predictor config: {0}")]
    InvalidConfig(String),
}

impl From<LatentError> for PriorError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::ShapeMismatch(m) => PriorError::ShapeMismatch(m),
            other => PriorError::RemoteProtocolError(other.to_string()),
        }
    }
}

/// Input to the predictor.
#[derive(Clone, Debug)]
pub struct PredictorRequest {
    pub video_id: String,
    pub initial_indices: IndexSet,
    /// Aligned with `initial_indices`.
    pub initial_latents: LatentSequence,
    pub question: String,
    pub answers: Vec<String>,
    pub generation_prompt: String,
    pub target_length: usize,
}

impl PredictorRequest {
    pub fn validate(&self) -> Result<(), PriorError> {
        if self.initial_indices.is_empty() {
            return Err(PriorError::InvalidRequest("no initial frames".into()));
        }
        if self.initial_latents.len() != self.initial_indices.len() {
            return Err(PriorError::InvalidRequest(format!(
                "{} initial latents for {} initial indices",
                self.initial_latents.len(),
                self.initial_indices.len()
            )));
        }
        let last = *self.initial_indices.indices().last().unwrap();
        if self.target_length < last + 1 {
            return Err(PriorError::InvalidRequest(format!(
                "target length {} does not cover initial index {last}",
                self.target_length
            )));
        }
        Ok(())
    }

    /// Identifies the request's conditioning, for caching generated latents.
    pub fn conditioning_fingerprint(&self) -> String {
        let mut desc = format!("T={};S=", self.target_length);
        for i in self.initial_indices.indices() {
            desc.push_str(&format!("{i},"));
        }
        desc.push_str(&format!(
            ";q={};a={};p={}",
            self.question,
            self.answers.join("\u{1f}"),
            self.generation_prompt
        ));
        short_hash(desc.as_bytes())
    }
}

/// Outside the anchor range every built-in kind copies the nearest anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Each index copies the latest anchor at or before it.
    Hold,
    /// Elementwise interpolation between bracketing anchors.
    Linear,
    /// SSIM-guided recursive bisection between bracketing anchors.
    SsimRecursive,
    /// Remote generation service.
    Remote,
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hold => "hold",
            Self::Linear => "linear",
            Self::SsimRecursive => "ssim_recursive",
            Self::Remote => "remote",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub ssim_threshold: f64,
    pub remote_endpoint: Option<String>,
}

impl PredictorConfig {
    pub fn builtin(kind: PredictorKind) -> Self {
        Self {
            kind,
            ssim_threshold: DEFAULT_SSIM_THRESHOLD,
            remote_endpoint: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: PredictorKind::Remote,
            ssim_threshold: DEFAULT_SSIM_THRESHOLD,
            remote_endpoint: Some(endpoint.into()),
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        match (self.kind, &self.remote_endpoint) {
            (PredictorKind::Remote, None) => Err(PriorError::InvalidConfig(
                "remote predictor needs an endpoint".into(),
            )),
            (kind, Some(_)) if kind != PredictorKind::Remote => Err(PriorError::InvalidConfig(
                format!("endpoint given for built-in predictor {kind}"),
            )),
            _ if !(self.ssim_threshold > 0.0 && self.ssim_threshold <= 1.0) => {
                Err(PriorError::InvalidConfig(format!(
                    "ssim threshold {} outside (0, 1]",
                    self.ssim_threshold
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn fingerprint(&self) -> String {
        let desc = match self.kind {
            PredictorKind::SsimRecursive => format!("ssim_recursive;thr={}", self.ssim_threshold),
            PredictorKind::Remote => format!(
                "remote;{}",
                self.remote_endpoint.as_deref().unwrap_or_default()
            ),
            kind => kind.to_string(),
        };
        short_hash(desc.as_bytes())
    }
}

/// Anything that maps a request to a full-length predicted sequence.
pub trait Predictor: Send + Sync {
    fn fingerprint(&self) -> String;
    /// Whether the predictor reads the question/answer conditioning.
    fn uses_conditioning(&self) -> bool;
    fn predict(&self, req: &PredictorRequest) -> Result<LatentSequence, PriorError>;
}

/// Built-in predictors over anchor latents.
#[derive(Clone, Debug)]
pub struct BuiltinPredictor {
    config: PredictorConfig,
}

impl BuiltinPredictor {
    pub fn new(config: PredictorConfig) -> Result<Self, PriorError> {
        config.validate()?;
        if config.kind == PredictorKind::Remote {
            return Err(PriorError::InvalidConfig(
                "remote is not a built-in predictor".into(),
            ));
        }
        Ok(Self { config })
    }
}

impl Predictor for BuiltinPredictor {
    fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn uses_conditioning(&self) -> bool {
        false
    }

    fn predict(&self, req: &PredictorRequest) -> Result<LatentSequence, PriorError> {
        predict_builtin(req, &self.config)
    }
}

/// Builds the predictor for a config: built-in kinds directly, remote via a
/// client with the default retry policy.
pub fn make_predictor(cfg: &PredictorConfig) -> Result<Box<dyn Predictor>, PriorError> {
    cfg.validate()?;
    match cfg.kind {
        PredictorKind::Remote => Ok(Box::new(RemotePredictor::new(RemoteClient::new(
            cfg.remote_endpoint.clone().unwrap(),
        )))),
        _ => Ok(Box::new(BuiltinPredictor::new(cfg.clone())?)),
    }
}

/// One-shot prediction for a config.
pub fn predict_full(
    req: &PredictorRequest,
    cfg: &PredictorConfig,
) -> Result<LatentSequence, PriorError> {
    make_predictor(cfg)?.predict(req)
}

fn predict_builtin(
    req: &PredictorRequest,
    cfg: &PredictorConfig,
) -> Result<LatentSequence, PriorError> {
    req.validate()?;
    let anchors = req.initial_indices.indices();
    let latents = req.initial_latents.latents();
    let first = &latents[0];
    for l in latents {
        first.ensure_same_shape(l)?;
    }
    let t = req.target_length;
    let mut out: Vec<Option<LatentFrame>> = vec![None; t];
    for (&i, l) in anchors.iter().zip(latents) {
        out[i] = Some(l.clone().with_source(LatentSource::Real(i)));
    }
    let last = anchors.len() - 1;
    for slot in out.iter_mut().take(anchors[0]) {
        *slot = Some(latents[0].clone().with_source(LatentSource::Generated));
    }
    for slot in out.iter_mut().skip(anchors[last] + 1) {
        *slot = Some(latents[last].clone().with_source(LatentSource::Generated));
    }
    for w in 0..last {
        let (lo, hi) = (anchors[w], anchors[w + 1]);
        let (left, right) = (&latents[w], &latents[w + 1]);
        let span = hi - lo - 1;
        let fill: Vec<LatentFrame> = match cfg.kind {
            PredictorKind::Hold => (0..span)
                .map(|_| left.clone().with_source(LatentSource::Generated))
                .collect(),
            PredictorKind::Linear => (1..=span)
                .map(|p| LatentFrame::lerp(left, right, p as f64 / (span + 1) as f64))
                .collect::<Result<_, _>>()?,
            PredictorKind::SsimRecursive => {
                recursive_interpolate_with_stats(left, right, span, cfg.ssim_threshold)?.0
            }
            PredictorKind::Remote => unreachable!("validated as built-in"),
        };
        for (p, l) in fill.into_iter().enumerate() {
            out[lo + 1 + p] = Some(l);
        }
    }
    let latents = out
        .into_iter()
        .map(|l| l.expect("every index between anchors is filled"))
        .collect();
    Ok(LatentSequence::new(
        req.video_id.clone(),
        req.initial_latents.encoder_fingerprint.clone(),
        latents,
    )?)
}

/// Global-statistics SSIM averaged over channels, with dynamic range taken as
/// the largest absolute value in either input (1 when both are all zero).
pub fn ssim(a: &LatentFrame, b: &LatentFrame) -> Result<f64, PriorError> {
    a.ensure_same_shape(b)?;
    let range = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let range = if range == 0.0 { 1.0 } else { range };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let channels = a.shape().channels;
    let mut total = 0.0;
    for c in 0..channels {
        let (x, y) = (a.channel(c), b.channel(c));
        let n = x.len() as f64;
        let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = |s: &[f32], m: f64| s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        let vx = var(x, mx);
        let vy = var(y, my);
        let cov = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| (p as f64 - mx) * (q as f64 - my))
            .sum::<f64>()
            / n;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / channels as f64)
}

pub fn recursive_interpolate(
    left: &LatentFrame,
    right: &LatentFrame,
    span: usize,
    threshold: f64,
) -> Result<Vec<LatentFrame>, PriorError> {
    Ok(recursive_interpolate_with_stats(left, right, span, threshold)?.0)
}

/// How many latents came from bisection versus the linear fill applied once
/// a sub-interval's endpoints are similar enough.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InterpolationStats {
    pub bisected: usize,
    pub filled: usize,
}

/// Fills `span` latents strictly between `left` (position 0) and `right`
/// (position `span + 1`). Each step inserts the interpolant at the middle of the
/// current interval; an interval whose endpoints reach `threshold` SSIM is
/// filled linearly instead of being split further.
pub fn recursive_interpolate_with_stats(
    left: &LatentFrame,
    right: &LatentFrame,
    span: usize,
    threshold: f64,
) -> Result<(Vec<LatentFrame>, InterpolationStats), PriorError> {
    left.ensure_same_shape(right)?;
    let mut slots: Vec<Option<LatentFrame>> = vec![None; span];
    let mut stats = InterpolationStats::default();
    bisect(left, right, 0, span + 1, threshold, &mut slots, &mut stats)?;
    Ok((
        slots
            .into_iter()
            .map(|s| s.expect("all positions filled"))
            .collect(),
        stats,
    ))
}

fn bisect(
    lo_l: &LatentFrame,
    hi_l: &LatentFrame,
    lo: usize,
    hi: usize,
    threshold: f64,
    slots: &mut [Option<LatentFrame>],
    stats: &mut InterpolationStats,
) -> Result<(), PriorError> {
    if hi - lo <= 1 {
        return Ok(());
    }
    let width = (hi - lo) as f64;
    if ssim(lo_l, hi_l)? >= threshold {
        for p in lo + 1..hi {
            slots[p - 1] = Some(LatentFrame::lerp(lo_l, hi_l, (p - lo) as f64 / width)?);
            stats.filled += 1;
        }
        return Ok(());
    }
    let mid = lo + (hi - lo) / 2;
    let m = LatentFrame::lerp(lo_l, hi_l, (mid - lo) as f64 / width)?;
    stats.bisected += 1;
    bisect(lo_l, &m, lo, mid, threshold, slots, stats)?;
    bisect(&m, hi_l, mid, hi, threshold, slots, stats)?;
    slots[mid - 1] = Some(m);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub latent_fingerprint: String,
    pub max_target_length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentsResponse {
    pub latents: LatentBlob,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictBody {
    pub initial_indices: Vec<usize>,
    pub initial_latents: LatentBlob,
    pub question: String,
    pub answers: Vec<String>,
    pub prompt: String,
    pub target_length: usize,
}

impl PredictBody {
    pub fn from_request(req: &PredictorRequest) -> Self {
        Self {
            initial_indices: req.initial_indices.indices().to_vec(),
            initial_latents: LatentBlob::from_sequence(&req.initial_latents),
            question: req.question.clone(),
            answers: req.answers.clone(),
            prompt: req.generation_prompt.clone(),
            target_length: req.target_length,
        }
    }
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

/// Client for the predictor wire protocol (`/health`, `/encode`, `/predict`).
#[derive(Debug)]
pub struct RemoteClient {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    in_flight: Semaphore,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_policy(
            endpoint,
            RetryPolicy::new(3, Duration::from_secs(1)),
            DEFAULT_REMOTE_TIMEOUT,
            DEFAULT_REMOTE_IN_FLIGHT,
        )
    }

    pub fn with_policy(
        endpoint: impl Into<String>,
        retry: RetryPolicy,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: transport::agent(timeout),
            retry,
            in_flight: Semaphore::new(max_in_flight),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&serde_json::Value>,
    ) -> Result<T, PriorError> {
        let url = transport::join_url(&self.endpoint, path);
        let _permit = self.in_flight.acquire();
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            let delay = self.retry.delay_before(attempt);
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
            match self.attempt(&url, body) {
                Ok(Attempt::Done(v)) => return Ok(v),
                Ok(Attempt::Retry(reason)) => {
                    warn!(%url, attempt, %reason, "remote predictor attempt failed");
                    last = reason;
                }
                Err(e) => return Err(e),
            }
        }
        Err(PriorError::RemoteUnavailable {
            attempts: self.retry.max_attempts,
            reason: last,
        })
    }

    fn attempt<T: serde::de::DeserializeOwned>(
        &self,
        url: &str,
        body: Option<&serde_json::Value>,
    ) -> Result<Attempt<T>, PriorError> {
        let sent = match body {
            Some(b) => self.agent.post(url).send_json(b),
            None => self.agent.get(url).call(),
        };
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match transport::read_body(&mut resp) {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        match status {
            200..=299 => serde_json::from_str(&text)
                .map(Attempt::Done)
                .map_err(|e| PriorError::RemoteProtocolError(format!("{url}: {e}"))),
            500..=599 => Ok(Attempt::Retry(format!("status {status}: {text}"))),
            _ => Err(PriorError::RemoteProtocolError(format!(
                "{url}: status {status}: {text}"
            ))),
        }
    }

    pub fn health(&self) -> Result<HealthResponse, PriorError> {
        self.call("/health", None)
    }

    /// Encodes frames in the server's latent space.
    pub fn encode(&self, video_id: &str, frames: &[Frame]) -> Result<LatentSequence, PriorError> {
        use base64::Engine as _;
        let health = self.health()?;
        let body = EncodeRequest {
            frames: frames
                .iter()
                .map(|f| base64::engine::general_purpose::STANDARD.encode(f.to_png()))
                .collect(),
        };
        let resp: LatentsResponse =
            self.call("/encode", Some(&serde_json::to_value(body).unwrap()))?;
        let decoded = resp.latents.decode()?;
        if decoded.len() != frames.len() {
            return Err(PriorError::RemoteProtocolError(format!(
                "{} latents for {} frames",
                decoded.len(),
                frames.len()
            )));
        }
        let latents = decoded
            .into_iter()
            .zip(frames)
            .map(|(l, f)| l.with_source(LatentSource::Real(f.index)))
            .collect();
        Ok(LatentSequence::new(
            video_id,
            health.latent_fingerprint,
            latents,
        )?)
    }

    pub fn predict(&self, req: &PredictorRequest) -> Result<LatentSequence, PriorError> {
        req.validate()?;
        let health = self.health()?;
        if health.latent_fingerprint != req.initial_latents.encoder_fingerprint {
            return Err(PriorError::FingerprintMismatch {
                server: health.latent_fingerprint,
                request: req.initial_latents.encoder_fingerprint.clone(),
            });
        }
        if req.target_length > health.max_target_length {
            return Err(PriorError::InvalidRequest(format!(
                "target length {} exceeds server maximum {}",
                req.target_length, health.max_target_length
            )));
        }
        let body = serde_json::to_value(PredictBody::from_request(req)).unwrap();
        let resp: LatentsResponse = self.call("/predict", Some(&body))?;
        let latents = resp.latents.decode()?;
        if latents.len() != req.target_length {
            return Err(PriorError::RemoteProtocolError(format!(
                "server returned {} latents, expected {}",
                latents.len(),
                req.target_length
            )));
        }
        let expected = req.initial_latents.shape();
        if let (Some(want), Some(got)) = (expected, latents.first().map(|l| l.shape())) {
            if want != got {
                return Err(PriorError::RemoteProtocolError(format!(
                    "server latent shape {got:?}, expected {want:?}"
                )));
            }
        }
        debug!(video = %req.video_id, len = latents.len(), "remote prediction received");
        Ok(LatentSequence::new(
            req.video_id.clone(),
            req.initial_latents.encoder_fingerprint.clone(),
            latents,
        )?)
    }
}

pub fn remote_predict(
    req: &PredictorRequest,
    endpoint: &str,
) -> Result<LatentSequence, PriorError> {
    RemoteClient::new(endpoint).predict(req)
}

pub struct RemotePredictor {
    client: RemoteClient,
}

impl RemotePredictor {
    pub fn new(client: RemoteClient) -> Self {
        Self { client }
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }
}

impl Predictor for RemotePredictor {
    fn fingerprint(&self) -> String {
        PredictorConfig::remote(self.client.endpoint()).fingerprint()
    }

    fn uses_conditioning(&self) -> bool {
        true
    }

    fn predict(&self, req: &PredictorRequest) -> Result<LatentSequence, PriorError> {
        self.client.predict(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latents::LatentShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(values: &[f32]) -> LatentFrame {
        LatentFrame::new(
            LatentShape::new(1, 1, values.len()),
            values.to_vec(),
            LatentSource::Generated,
        )
        .unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, shape: LatentShape) -> LatentFrame {
        let data = (0..shape.len())
            .map(|_| rng.random_range(-2.0f32..2.0))
            .collect();
        LatentFrame::new(shape, data, LatentSource::Generated).unwrap()
    }

    fn request(anchors: &[usize], values: &[f32], t: usize) -> PredictorRequest {
        let latents = values
            .iter()
            .zip(anchors)
            .map(|(&v, &i)| frame(&[v, 2.0 * v]).with_source(LatentSource::Real(i)))
            .collect();
        PredictorRequest {
            video_id: "v".into(),
            initial_indices: IndexSet::new(anchors.to_vec(), t).unwrap(),
            initial_latents: LatentSequence::new("v", "enc", latents).unwrap(),
            question: String::new(),
            answers: vec![],
            generation_prompt: String::new(),
            target_length: t,
        }
    }

    fn first_values(seq: &LatentSequence) -> Vec<f32> {
        seq.latents().iter().map(|l| l.data()[0]).collect()
    }

    #[test]
    fn hold_copies_latest_anchor() {
        let req = request(&[0, 4], &[1.0, 5.0], 8);
        let out = predict_full(&req, &PredictorConfig::builtin(PredictorKind::Hold)).unwrap();
        assert_eq!(
            first_values(&out),
            vec![1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0]
        );
    }

    #[test]
    fn linear_midpoint() {
        let req = request(&[0, 4], &[1.0, 5.0], 5);
        let out = predict_full(&req, &PredictorConfig::builtin(PredictorKind::Linear)).unwrap();
        assert_eq!(out.latents()[2].data(), &[3.0, 6.0]);
    }

    #[test]
    fn linear_clamps_past_edges() {
        let req = request(&[2, 4], &[1.0, 2.0], 7);
        let out = predict_full(&req, &PredictorConfig::builtin(PredictorKind::Linear)).unwrap();
        assert_eq!(first_values(&out), vec![1.0, 1.0, 1.0, 1.5, 2.0, 2.0, 2.0]);
        let single = request(&[3], &[4.0], 5);
        let out = predict_full(&single, &PredictorConfig::builtin(PredictorKind::Linear)).unwrap();
        assert_eq!(first_values(&out), vec![4.0; 5]);
    }

    #[test]
    fn all_anchors_reproduce_inputs() {
        let vals: Vec<f32> = (0..6).map(|i| i as f32 * 0.7 - 1.0).collect();
        let req = request(&[0, 1, 2, 3, 4, 5], &vals, 6);
        for kind in [
            PredictorKind::Hold,
            PredictorKind::Linear,
            PredictorKind::SsimRecursive,
        ] {
            let out = predict_full(&req, &PredictorConfig::builtin(kind)).unwrap();
            for (p, r) in out.latents().iter().zip(req.initial_latents.latents()) {
                assert_eq!(p.data(), r.data());
            }
        }
    }

    #[test]
    fn anchors_are_exact_for_every_builtin() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = LatentShape::new(2, 3, 3);
        for _ in 0..20 {
            let t = rng.random_range(2..40);
            let k = rng.random_range(1..=t.min(6));
            let idx = crate::ingest::uniform_sample(t, k).unwrap();
            let latents = (0..k).map(|_| random_frame(&mut rng, shape)).collect();
            let req = PredictorRequest {
                video_id: "v".into(),
                initial_latents: LatentSequence::new("v", "enc", latents).unwrap(),
                initial_indices: idx.clone(),
                question: "q".into(),
                answers: vec![],
                generation_prompt: String::new(),
                target_length: t,
            };
            for kind in [
                PredictorKind::Hold,
                PredictorKind::Linear,
                PredictorKind::SsimRecursive,
            ] {
                let out = predict_full(&req, &PredictorConfig::builtin(kind)).unwrap();
                assert_eq!(out.len(), t);
                for (j, &i) in idx.indices().iter().enumerate() {
                    assert_eq!(
                        out.latents()[i].data(),
                        req.initial_latents.latents()[j].data()
                    );
                }
            }
        }
    }

    #[test]
    fn request_validation() {
        let mut req = request(&[0, 4], &[1.0, 5.0], 5);
        req.target_length = 4;
        assert!(matches!(
            predict_full(&req, &PredictorConfig::builtin(PredictorKind::Linear)),
            Err(PriorError::InvalidRequest(_))
        ));
        assert!(PredictorConfig {
            kind: PredictorKind::Remote,
            ssim_threshold: 0.9,
            remote_endpoint: None
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ssim_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_frame(&mut rng, LatentShape::new(3, 4, 5));
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_of_negated_two_value_tensor() {
        // x = [1, -1]: mean 0, variance 1, range 1, C2 = 0.03^2.
        // ssim = (0 + C1)(2 * -1 + C2) / ((0 + C1)(1 + 1 + C2)) = (C2 - 2) / (C2 + 2)
        let c2 = 0.03f64 * 0.03;
        let expected = (c2 - 2.0) / (c2 + 2.0);
        let got = ssim(&frame(&[1.0, -1.0]), &frame(&[-1.0, 1.0])).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got + 1.0).abs() < 1e-3);
    }

    #[test]
    fn ssim_all_zero_convention() {
        assert_eq!(
            ssim(&frame(&[0.0, 0.0, 0.0]), &frame(&[0.0, 0.0, 0.0])).unwrap(),
            1.0
        );
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_frame(&mut rng, LatentShape::new(2, 3, 4));
            let b = random_frame(&mut rng, LatentShape::new(2, 3, 4));
            assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        }
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(matches!(
            ssim(&frame(&[1.0]), &frame(&[1.0, 2.0])),
            Err(PriorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn interpolate_degenerate_spans() {
        let (l, r) = (frame(&[0.0, 2.0]), frame(&[4.0, 6.0]));
        assert!(recursive_interpolate(&l, &r, 0, 0.5).unwrap().is_empty());
        for thr in [0.01, 0.5, 1.0] {
            let one = recursive_interpolate(&l, &r, 1, thr).unwrap();
            assert_eq!(one.len(), 1);
            assert_eq!(one[0].data(), &[2.0, 4.0]);
        }
    }

    #[test]
    fn interpolate_span_three_full_recursion() {
        let (l, r) = (frame(&[0.0, 8.0]), frame(&[8.0, 0.0]));
        let (out, stats) = recursive_interpolate_with_stats(&l, &r, 3, 1.0).unwrap();
        let got: Vec<&[f32]> = out.iter().map(|f| f.data()).collect();
        assert_eq!(got, vec![&[2.0, 6.0][..], &[4.0, 4.0], &[6.0, 2.0]]);
        assert_eq!(
            stats,
            InterpolationStats {
                bisected: 3,
                filled: 0
            }
        );
    }

    #[test]
    fn early_stop_fills_linearly() {
        let (l, r) = (frame(&[1.0, 2.0, 3.0]), frame(&[1.0, 2.0, 3.0]));
        let (out, stats) = recursive_interpolate_with_stats(&l, &r, 6, 0.9).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(
            stats,
            InterpolationStats {
                bisected: 0,
                filled: 6
            }
        );
    }

    #[test]
    fn full_recursion_matches_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = LatentShape::new(2, 4, 4);
        for _ in 0..200 {
            let l = random_frame(&mut rng, shape);
            let r = random_frame(&mut rng, shape);
            let span = rng.random_range(0..40);
            let out = recursive_interpolate(&l, &r, span, 1.0).unwrap();
            assert_eq!(out.len(), span);
            for (p, got) in out.iter().enumerate() {
                let t = (p + 1) as f64 / (span + 1) as f64;
                for ((&g, &a), &b) in got.data().iter().zip(l.data()).zip(r.data()) {
                    let want = (1.0 - t) * a as f64 + t * b as f64;
                    let scale = want.abs().max(a.abs().max(b.abs()) as f64).max(1e-6);
                    assert!(((g as f64 - want) / scale).abs() < 1e-6, "{g} vs {want}");
                }
            }
        }
    }

    #[test]
    fn fingerprints_distinguish_configs() {
        let a = PredictorConfig::builtin(PredictorKind::Linear).fingerprint();
        let b = PredictorConfig::builtin(PredictorKind::Hold).fingerprint();
        let mut c = PredictorConfig::builtin(PredictorKind::SsimRecursive);
        let c1 = c.fingerprint();
        c.ssim_threshold = 0.5;
        assert_ne!(a, b);
        assert_ne!(c1, c.fingerprint());
    }
}
