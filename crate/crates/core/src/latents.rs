//! Deterministic analytic latent encoder and latent-sequence utilities.
//!
//! Every real frame is mapped to a `C x (H/8) x (W/8)` grid, one cell per 8x8
//! pixel block. The eight channels are fixed linear-ish block statistics:
//!
//! | channel | statistic                                       |
//! |---------|-------------------------------------------------|
//! | 0       | mean luma                                       |
//! | 1..=3   | mean R, G, B                                    |
//! | 4       | mean horizontal forward difference of luma      |
//! | 5       | mean vertical forward difference of luma        |
//! | 6       | mean absolute luma change from previous frame   |
//! | 7       | luma variance within the block                  |
//!
//! Pixel values are scaled to `[0, 1]` before any statistic is taken.
//! With a temporal stride of 4 the per-frame grids are averaged over
//! consecutive 4-frame groups.

use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{IndexSet, VideoClip, SPATIAL_STRIDE};

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("non-finite latent value at frame {frame}")]
    NonFinite { frame: usize },
    #[error("malformed latent blob: {0}")]
    MalformedBlob(String),
    #[error("latent blob checksum mismatch: expected {expected:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { expected: u32, computed: u32 },
}

/// `(channels, height, width)` of one latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Where a latent came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    Real(usize),
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrame {
    shape: LatentShape,
    data: Vec<f32>,
    pub source: LatentSource,
}

impl LatentFrame {
    pub fn new(
        shape: LatentShape,
        data: Vec<f32>,
        source: LatentSource,
    ) -> Result<Self, LatentError> {
        if data.len() != shape.len() {
            return Err(LatentError::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data,
            source,
        })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
            source: LatentSource::Generated,
        }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<(), LatentError> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(LatentError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    /// `(1 - t) * a + t * b`, evaluated in f64. Exact at `t = 0` and `t = 1`.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Result<Self, LatentError> {
        a.ensure_same_shape(b)?;
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| ((1.0 - t) * x as f64 + t * y as f64) as f32)
            .collect();
        Ok(Self {
            shape: a.shape,
            data,
            source: LatentSource::Generated,
        })
    }

    pub fn midpoint(a: &Self, b: &Self) -> Result<Self, LatentError> {
        Self::lerp(a, b, 0.5)
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
            source: self.source,
        }
    }

    pub fn with_source(mut self, source: LatentSource) -> Self {
        self.source = source;
        self
    }
}

/// Latents of one video in one latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub video_id: String,
    pub encoder_fingerprint: String,
    latents: Vec<LatentFrame>,
}

impl LatentSequence {
    pub fn new(
        video_id: impl Into<String>,
        encoder_fingerprint: impl Into<String>,
        latents: Vec<LatentFrame>,
    ) -> Result<Self, LatentError> {
        if let Some(first) = latents.first() {
            if let Some(bad) = latents.iter().find(|l| l.shape != first.shape) {
                return Err(LatentError::ShapeMismatch(format!(
                    "{:?} vs {:?}",
                    first.shape, bad.shape
                )));
            }
        }
        Ok(Self {
            video_id: video_id.into(),
            encoder_fingerprint: encoder_fingerprint.into(),
            latents,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latents(&self) -> &[LatentFrame] {
        &self.latents
    }

    pub fn into_latents(self) -> Vec<LatentFrame> {
        self.latents
    }

    pub fn get(&self, i: usize) -> Option<&LatentFrame> {
        self.latents.get(i)
    }

    pub fn shape(&self) -> Option<LatentShape> {
        self.latents.first().map(|l| l.shape)
    }

    pub fn ensure_finite(&self) -> Result<(), LatentError> {
        match self.latents.iter().position(|l| !l.is_finite()) {
            Some(frame) => Err(LatentError::NonFinite { frame }),
            None => Ok(()),
        }
    }

    /// Sub-sequence at the given positions.
    pub fn pick(&self, indices: &IndexSet) -> Result<Self, LatentError> {
        let latents = indices
            .indices()
            .iter()
            .map(|&i| {
                self.latents.get(i).cloned().ok_or_else(|| {
                    LatentError::InvalidLength(format!("index {i} beyond length {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            self.video_id.clone(),
            self.encoder_fingerprint.clone(),
            latents,
        )
    }

    /// Every latent multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            video_id: self.video_id.clone(),
            encoder_fingerprint: self.encoder_fingerprint.clone(),
            latents: self.latents.iter().map(|l| l.scaled(factor)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelFilter {
    Luma,
    Red,
    Green,
    Blue,
    HorizontalGradient,
    VerticalGradient,
    TemporalDifference,
    LocalVariance,
}

impl ChannelFilter {
    pub const ALL: [ChannelFilter; 8] = [
        ChannelFilter::Luma,
        ChannelFilter::Red,
        ChannelFilter::Green,
        ChannelFilter::Blue,
        ChannelFilter::HorizontalGradient,
        ChannelFilter::VerticalGradient,
        ChannelFilter::TemporalDifference,
        ChannelFilter::LocalVariance,
    ];

    fn name(self) -> &'static str {
        match self {
            Self::Luma => "luma",
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::HorizontalGradient => "grad_x",
            Self::VerticalGradient => "grad_y",
            Self::TemporalDifference => "temporal_abs_diff",
            Self::LocalVariance => "variance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalStride {
    One,
    Four,
}

impl TemporalStride {
    pub fn frames(self) -> usize {
        match self {
            Self::One => 1,
            Self::Four => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub temporal_stride: TemporalStride,
    pub filters: Vec<ChannelFilter>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            temporal_stride: TemporalStride::One,
            filters: ChannelFilter::ALL.to_vec(),
        }
    }
}

impl EncoderConfig {
    pub fn with_temporal_stride(stride: TemporalStride) -> Self {
        Self {
            temporal_stride: stride,
            ..Self::default()
        }
    }

    pub fn spatial_stride(&self) -> u32 {
        SPATIAL_STRIDE
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    /// Content hash of the configuration.
    pub fn fingerprint(&self) -> String {
        let names: Vec<&str> = self.filters.iter().map(|f| f.name()).collect();
        let desc = format!(
            "analytic-v1;spatial={};temporal={};filters={}",
            SPATIAL_STRIDE,
            self.temporal_stride.frames(),
            names.join(",")
        );
        short_hash(desc.as_bytes())
    }

    pub fn latent_shape(&self, width: u32, height: u32) -> LatentShape {
        LatentShape::new(
            self.channels(),
            (height / SPATIAL_STRIDE) as usize,
            (width / SPATIAL_STRIDE) as usize,
        )
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct Planes {
    r: Vec<f32>,
    g: Vec<f32>,
    b: Vec<f32>,
    luma: Vec<f32>,
}

fn planes(img: &image::RgbImage) -> Planes {
    let n = (img.width() * img.height()) as usize;
    let mut p = Planes {
        r: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        luma: Vec::with_capacity(n),
    };
    for px in img.pixels() {
        let [r, g, b] = px.0.map(|v| v as f32 / 255.0);
        p.r.push(r);
        p.g.push(g);
        p.b.push(b);
        p.luma.push(0.299 * r + 0.587 * g + 0.114 * b);
    }
    p
}

fn luma_plane(img: &image::RgbImage) -> Vec<f32> {
    img.pixels()
        .map(|px| {
            let [r, g, b] = px.0.map(|v| v as f32 / 255.0);
            0.299 * r + 0.587 * g + 0.114 * b
        })
        .collect()
}

fn encode_frame(
    cfg: &EncoderConfig,
    img: &image::RgbImage,
    prev: Option<&image::RgbImage>,
    index: usize,
) -> LatentFrame {
    let width = img.width() as usize;
    let shape = cfg.latent_shape(img.width(), img.height());
    let s = SPATIAL_STRIDE as usize;
    let p = planes(img);
    let prev_luma = prev.map(luma_plane);
    let mut data = vec![0.0f32; shape.len()];
    let plane = shape.plane();
    let block_n = (s * s) as f64;
    for by in 0..shape.height {
        for bx in 0..shape.width {
            let mut sum = [0.0f64; 4];
            let mut sum_sq = 0.0f64;
            let mut gx = 0.0f64;
            let mut gy = 0.0f64;
            let mut dt = 0.0f64;
            for y in by * s..(by + 1) * s {
                let row = y * width;
                for x in bx * s..(bx + 1) * s {
                    let i = row + x;
                    let l = p.luma[i] as f64;
                    sum[0] += l;
                    sum[1] += p.r[i] as f64;
                    sum[2] += p.g[i] as f64;
                    sum[3] += p.b[i] as f64;
                    sum_sq += l * l;
                    if x + 1 < (bx + 1) * s {
                        gx += p.luma[i + 1] as f64 - l;
                    }
                    if y + 1 < (by + 1) * s {
                        gy += p.luma[i + width] as f64 - l;
                    }
                    if let Some(prev) = &prev_luma {
                        dt += (l - prev[i] as f64).abs();
                    }
                }
            }
            let pairs = (s * (s - 1)) as f64;
            let mean = sum[0] / block_n;
            let cell = by * shape.width + bx;
            for (c, filter) in cfg.filters.iter().enumerate() {
                let v = match filter {
                    ChannelFilter::Luma => mean,
                    ChannelFilter::Red => sum[1] / block_n,
                    ChannelFilter::Green => sum[2] / block_n,
                    ChannelFilter::Blue => sum[3] / block_n,
                    ChannelFilter::HorizontalGradient => gx / pairs,
                    ChannelFilter::VerticalGradient => gy / pairs,
                    ChannelFilter::TemporalDifference => dt / block_n,
                    ChannelFilter::LocalVariance => (sum_sq / block_n - mean * mean).max(0.0),
                };
                data[c * plane + cell] = v as f32;
            }
        }
    }
    LatentFrame {
        shape,
        data,
        source: LatentSource::Real(index),
    }
}

fn check_clip(clip: &VideoClip, cfg: &EncoderConfig) -> Result<(), LatentError> {
    if !clip.width().is_multiple_of(SPATIAL_STRIDE) || !clip.height().is_multiple_of(SPATIAL_STRIDE)
    {
        return Err(LatentError::ShapeMismatch(format!(
            "{}x{} is not divisible by the spatial stride {}",
            clip.width(),
            clip.height(),
            SPATIAL_STRIDE
        )));
    }
    if clip.len() < cfg.temporal_stride.frames() {
        return Err(LatentError::ShapeMismatch(format!(
            "{} frames is shorter than the temporal stride {}",
            clip.len(),
            cfg.temporal_stride.frames()
        )));
    }
    Ok(())
}

fn encode_per_frame(clip: &VideoClip, cfg: &EncoderConfig, indices: &[usize]) -> Vec<LatentFrame> {
    let frames = clip.frames();
    indices
        .par_iter()
        .map(|&i| {
            let prev = i.checked_sub(1).map(|p| frames[p].image.as_ref());
            encode_frame(cfg, &frames[i].image, prev, i)
        })
        .collect()
}

fn average(group: &[LatentFrame], first_index: usize) -> LatentFrame {
    let shape = group[0].shape;
    let mut acc = vec![0.0f64; shape.len()];
    for l in group {
        for (a, &v) in acc.iter_mut().zip(&l.data) {
            *a += v as f64;
        }
    }
    let n = group.len() as f64;
    LatentFrame {
        shape,
        data: acc.into_iter().map(|v| (v / n) as f32).collect(),
        source: LatentSource::Real(first_index),
    }
}

/// Encodes every frame of `clip`. Stride 1 gives `L = T`; stride 4 gives
/// `L = ceil(T / 4)` group averages (the last group may be partial).
pub fn encode_clip(clip: &VideoClip, cfg: &EncoderConfig) -> Result<LatentSequence, LatentError> {
    check_clip(clip, cfg)?;
    let all: Vec<usize> = (0..clip.len()).collect();
    let per_frame = encode_per_frame(clip, cfg, &all);
    let latents = match cfg.temporal_stride {
        TemporalStride::One => per_frame,
        TemporalStride::Four => per_frame
            .chunks(4)
            .enumerate()
            .map(|(g, chunk)| average(chunk, g * 4))
            .collect(),
    };
    LatentSequence::new(clip.video_id.clone(), cfg.fingerprint(), latents)
}

/// Encodes only the frames at `indices`, each in context of its true
/// predecessor, so the result matches the corresponding entries of
/// [`encode_clip`] (stride 1) or the group latent containing each index
/// (stride 4).
pub fn encode_frames_at(
    clip: &VideoClip,
    indices: &IndexSet,
    cfg: &EncoderConfig,
) -> Result<LatentSequence, LatentError> {
    check_clip(clip, cfg)?;
    if indices.universe_size() != clip.len() {
        return Err(LatentError::InvalidLength(format!(
            "index set over {} frames for a clip of {}",
            indices.universe_size(),
            clip.len()
        )));
    }
    let latents = match cfg.temporal_stride {
        TemporalStride::One => encode_per_frame(clip, cfg, indices.indices()),
        TemporalStride::Four => indices
            .indices()
            .iter()
            .map(|&i| {
                let start = i / 4 * 4;
                let group: Vec<usize> = (start..(start + 4).min(clip.len())).collect();
                average(&encode_per_frame(clip, cfg, &group), start)
            })
            .collect(),
    };
    LatentSequence::new(clip.video_id.clone(), cfg.fingerprint(), latents)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum UpsampleMethod {
    /// Target `j` takes source `floor(j * L / T)`.
    Nearest,
    /// Target `j` interpolates at source position `j * (L - 1) / (T - 1)`.
    Linear,
}

pub fn upsample_to_length(
    seq: &LatentSequence,
    target: usize,
    method: UpsampleMethod,
) -> Result<LatentSequence, LatentError> {
    let len = seq.len();
    if len == 0 || target < len {
        return Err(LatentError::InvalidLength(format!(
            "cannot upsample {len} latents to {target}"
        )));
    }
    if len == target {
        return Ok(seq.clone());
    }
    let src = seq.latents();
    let latents = (0..target)
        .map(|j| match method {
            UpsampleMethod::Nearest => Ok(src[j * len / target].clone()),
            UpsampleMethod::Linear => {
                let pos = if target == 1 {
                    0.0
                } else {
                    j as f64 * (len - 1) as f64 / (target - 1) as f64
                };
                let lo = (pos.floor() as usize).min(len - 1);
                let frac = pos - lo as f64;
                if frac == 0.0 || lo + 1 >= len {
                    Ok(src[lo].clone())
                } else {
                    LatentFrame::lerp(&src[lo], &src[lo + 1], frac)
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    LatentSequence::new(
        seq.video_id.clone(),
        seq.encoder_fingerprint.clone(),
        latents,
    )
}

/// JSON transport form of a latent sequence: little-endian f32 payload,
/// base64-encoded, with a CRC32 of the raw bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlob {
    /// `[L, C, Hl, Wl]`
    pub shape: [usize; 4],
    pub data: String,
    pub crc32: u32,
}

impl LatentBlob {
    pub fn from_latents(latents: &[LatentFrame]) -> Self {
        let shape = latents
            .first()
            .map(|l| l.shape)
            .unwrap_or(LatentShape::new(0, 0, 0));
        let mut raw = Vec::with_capacity(latents.len() * shape.len() * 4);
        for l in latents {
            for v in &l.data {
                raw.extend_from_slice(&v.to_le_bytes());
            }
        }
        Self {
            shape: [latents.len(), shape.channels, shape.height, shape.width],
            crc32: crc32fast::hash(&raw),
            data: base64::engine::general_purpose::STANDARD.encode(&raw),
        }
    }

    pub fn from_sequence(seq: &LatentSequence) -> Self {
        Self::from_latents(seq.latents())
    }

    /// Decodes and validates CRC, shape and finiteness. Decoded latents are
    /// marked as generated.
    pub fn decode(&self) -> Result<Vec<LatentFrame>, LatentError> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| LatentError::MalformedBlob(format!("base64: {e}")))?;
        let computed = crc32fast::hash(&raw);
        if computed != self.crc32 {
            return Err(LatentError::ChecksumMismatch {
                expected: self.crc32,
                computed,
            });
        }
        let [l, c, h, w] = self.shape;
        let shape = LatentShape::new(c, h, w);
        let expected = l
            .checked_mul(shape.len())
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| LatentError::MalformedBlob("shape overflows".into()))?;
        if raw.len() != expected {
            return Err(LatentError::MalformedBlob(format!(
                "{} bytes for shape {:?}",
                raw.len(),
                self.shape
            )));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let frames: Vec<LatentFrame> = (0..l)
            .map(|i| LatentFrame {
                shape,
                data: values[i * shape.len()..(i + 1) * shape.len()].to_vec(),
                source: LatentSource::Generated,
            })
            .collect();
        if let Some(frame) = frames.iter().position(|f| !f.is_finite()) {
            return Err(LatentError::NonFinite { frame });
        }
        Ok(frames)
    }

    pub fn into_sequence(
        &self,
        video_id: &str,
        encoder_fingerprint: &str,
    ) -> Result<LatentSequence, LatentError> {
        LatentSequence::new(video_id, encoder_fingerprint, self.decode()?)
    }
}
