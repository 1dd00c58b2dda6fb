//! Frame-sequence loading, resolution normalization and the index sets the
//! selection pipeline samples from.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spatial stride of the latent encoder; clip dimensions must be multiples of it.
pub const SPATIAL_STRIDE: u32 = 8;
pub const DEFAULT_WIDTH: u32 = 720;
pub const DEFAULT_HEIGHT: u32 = 480;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("unreadable frame {path}: {reason}")]
    UnreadableFrame { path: PathBuf, reason: String },
    #[error("no frames found in {0}")]
    EmptySequence(PathBuf),
    #[error("frame {path} is {found:?}, expected {expected:?}")]
    InconsistentDimensions {
        path: PathBuf,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("invalid dimensions {width}x{height}: both must be >= 8 and divisible by 8")]
    InvalidDimensions { width: u32, height: u32 },
    #[error("invalid count: k={k} for T={total}")]
    InvalidCount { total: usize, k: usize },
    #[error("invalid fps: {0}")]
    InvalidFps(f64),
    #[error("bad metadata file {path}: {reason}")]
    BadMetadata { path: PathBuf, reason: String },
    #[error("external decoder failed: {0}")]
    DecoderFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single decoded RGB frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub timestamp_s: f64,
    pub image: Arc<RgbImage>,
}

impl Frame {
    pub fn new(index: usize, timestamp_s: f64, image: RgbImage) -> Self {
        Self {
            index,
            timestamp_s,
            image: Arc::new(image),
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// PNG encoding of the frame, used for transport.
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.image
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("png encoding of an in-memory RGB buffer cannot fail");
        out.into_inner()
    }
}

/// An ordered, immutable frame sequence with contiguous indices `0..T`.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub video_id: String,
    pub fps: f64,
    frames: Vec<Frame>,
    width: u32,
    height: u32,
}

impl VideoClip {
    /// Builds a clip from images in display order. Indices and timestamps are
    /// assigned from the position in `images`.
    pub fn from_images(
        video_id: impl Into<String>,
        fps: f64,
        images: Vec<RgbImage>,
    ) -> Result<Self, IngestError> {
        let video_id = video_id.into();
        let first = images
            .first()
            .ok_or_else(|| IngestError::EmptySequence(PathBuf::from(&video_id)))?;
        let (width, height) = first.dimensions();
        let mut frames = Vec::with_capacity(images.len());
        for (index, img) in images.into_iter().enumerate() {
            if img.dimensions() != (width, height) {
                return Err(IngestError::InconsistentDimensions {
                    path: PathBuf::from(format!("{video_id}#{index}")),
                    expected: (width, height),
                    found: img.dimensions(),
                });
            }
            frames.push(Frame::new(index, timestamp(index, fps), img));
        }
        Ok(Self {
            video_id,
            fps,
            frames,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> Option<&Frame> {
        self.frames.get(index)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn duration_s(&self) -> f64 {
        if self.fps > 0.0 {
            self.frames.len() as f64 / self.fps
        } else {
            0.0
        }
    }

    /// Frames at the given indices, in the order of the index set.
    pub fn select(&self, indices: &IndexSet) -> Vec<Frame> {
        indices
            .indices()
            .iter()
            .filter_map(|&i| self.frames.get(i).cloned())
            .collect()
    }
}

fn timestamp(index: usize, fps: f64) -> f64 {
    if fps > 0.0 {
        index as f64 / fps
    } else {
        0.0
    }
}

/// Strictly increasing indices into a sequence of `universe_size` frames.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe_size: usize,
}

impl IndexSet {
    /// Sorts and validates `indices`. Returns `None` on duplicates or
    /// out-of-range entries.
    pub fn new(mut indices: Vec<usize>, universe_size: usize) -> Option<Self> {
        indices.sort_unstable();
        let valid = indices.windows(2).all(|w| w[0] < w[1])
            && indices.last().is_none_or(|&last| last < universe_size);
        valid.then_some(Self {
            indices,
            universe_size,
        })
    }

    pub fn full(universe_size: usize) -> Self {
        Self {
            indices: (0..universe_size).collect(),
            universe_size,
        }
    }

    pub fn empty(universe_size: usize) -> Self {
        Self {
            indices: Vec::new(),
            universe_size,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ShiftDirection {
    Left,
    Middle,
    Right,
}

impl std::fmt::Display for ShiftDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Left => "left",
            Self::Middle => "middle",
            Self::Right => "right",
        })
    }
}

fn check_count(total: usize, k: usize) -> Result<(), IngestError> {
    if k < 1 || k > total {
        Err(IngestError::InvalidCount { total, k })
    } else {
        Ok(())
    }
}

/// `index_j = floor(j * T / k)` for `j = 0..k`.
pub fn uniform_sample(total: usize, k: usize) -> Result<IndexSet, IngestError> {
    check_count(total, k)?;
    let indices = (0..k).map(|j| j * total / k).collect();
    Ok(IndexSet {
        indices,
        universe_size: total,
    })
}

/// Uniform sampling shifted by a third of a block (`floor(floor(T/k) / 3)`),
/// clamped to the sequence. Collisions after clamping move to the nearest free
/// index above (below if none is free above).
pub fn shift_sample(
    total: usize,
    k: usize,
    direction: ShiftDirection,
) -> Result<IndexSet, IngestError> {
    let base = uniform_sample(total, k)?;
    let shift = (total / k) / 3;
    if direction == ShiftDirection::Middle || shift == 0 {
        return Ok(base);
    }
    let mut taken = vec![false; total];
    let mut indices = Vec::with_capacity(k);
    for &i in base.indices() {
        let target = match direction {
            ShiftDirection::Left => i.saturating_sub(shift),
            ShiftDirection::Right => (i + shift).min(total - 1),
            ShiftDirection::Middle => unreachable!(),
        };
        let slot = (target..total)
            .find(|&j| !taken[j])
            .or_else(|| (0..target).rev().find(|&j| !taken[j]))
            .expect("k <= T leaves a free slot");
        taken[slot] = true;
        indices.push(slot);
    }
    Ok(IndexSet::new(indices, total).expect("slots are unique and in range"))
}

/// One index per `1 / target_fps` seconds of timeline, starting at t = 0.
pub fn fps_sample(clip: &VideoClip, target_fps: f64) -> Result<IndexSet, IngestError> {
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(IngestError::InvalidFps(target_fps));
    }
    if !(clip.fps > 0.0 && clip.fps.is_finite()) {
        return Err(IngestError::InvalidFps(clip.fps));
    }
    let total = clip.len();
    let step = clip.fps / target_fps;
    let mut indices = Vec::new();
    let mut j = 0usize;
    loop {
        // Small epsilon so that e.g. 29.999999 frames rounds to frame 30.
        let index = (j as f64 * step + 1e-9).floor() as usize;
        if index >= total {
            break;
        }
        if indices.last() != Some(&index) {
            indices.push(index);
        }
        j += 1;
    }
    Ok(IndexSet {
        indices,
        universe_size: total,
    })
}

/// Bilinear resize of every frame. A clip already at the target size is
/// returned unchanged.
pub fn resize_clip(clip: &VideoClip, width: u32, height: u32) -> Result<VideoClip, IngestError> {
    if width < SPATIAL_STRIDE
        || height < SPATIAL_STRIDE
        || !width.is_multiple_of(SPATIAL_STRIDE)
        || !height.is_multiple_of(SPATIAL_STRIDE)
    {
        return Err(IngestError::InvalidDimensions { width, height });
    }
    if clip.width == width && clip.height == height {
        return Ok(clip.clone());
    }
    let frames = clip
        .frames
        .iter()
        .map(|f| Frame {
            index: f.index,
            timestamp_s: f.timestamp_s,
            image: Arc::new(image::imageops::resize(
                f.image.as_ref(),
                width,
                height,
                FilterType::Triangle,
            )),
        })
        .collect();
    Ok(VideoClip {
        video_id: clip.video_id.clone(),
        fps: clip.fps,
        frames,
        width,
        height,
    })
}

/// How frames are stored on disk.
#[derive(Clone, Debug)]
pub enum FrameLayout {
    /// A directory of lexicographically ordered images plus optional `meta.json`.
    ImageDirectory,
    /// A container file decoded to an image directory by an external program.
    Container(ExternalDecoder),
}

/// Subprocess decoder. `{input}` and `{output}` in `args` are replaced with the
/// container path and the pattern of the image files to write.
#[derive(Clone, Debug)]
pub struct ExternalDecoder {
    pub program: String,
    pub args: Vec<String>,
}

impl Default for ExternalDecoder {
    fn default() -> Self {
        Self {
            program: "ffmpeg".into(),
            args: ["-v", "error", "-i", "{input}", "-vsync", "0", "{output}"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ClipMeta {
    fps: f64,
}

/// Loads a clip. `fps_override` wins over `meta.json`; when neither is present
/// fps is 0 and timestamps are all 0.
pub fn load_frame_sequence(
    path: &Path,
    layout: &FrameLayout,
    fps_override: Option<f64>,
) -> Result<VideoClip, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingPath(path.to_path_buf()));
    }
    match layout {
        FrameLayout::ImageDirectory => load_image_directory(path, fps_override),
        FrameLayout::Container(decoder) => {
            let scratch = tempfile::tempdir()?;
            let pattern = scratch.path().join("%06d.png");
            let args: Vec<String> = decoder
                .args
                .iter()
                .map(|a| {
                    a.replace("{input}", &path.to_string_lossy())
                        .replace("{output}", &pattern.to_string_lossy())
                })
                .collect();
            let status = Command::new(&decoder.program)
                .args(&args)
                .status()
                .map_err(|e| IngestError::DecoderFailed(format!("{}: {e}", decoder.program)))?;
            if !status.success() {
                return Err(IngestError::DecoderFailed(format!(
                    "{} exited with {status}",
                    decoder.program
                )));
            }
            let mut clip = load_image_directory(scratch.path(), fps_override)?;
            clip.video_id = video_id_of(path);
            Ok(clip)
        }
    }
}

fn video_id_of(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into())
}

fn read_meta(dir: &Path) -> Result<Option<f64>, IngestError> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta_path)?;
    let meta: ClipMeta = serde_json::from_str(&text).map_err(|e| IngestError::BadMetadata {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    Ok(Some(meta.fps))
}

/// Sorted paths of the image files in `dir`.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_image_directory(dir: &Path, fps_override: Option<f64>) -> Result<VideoClip, IngestError> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(IngestError::EmptySequence(dir.to_path_buf()));
    }
    let fps = match fps_override {
        Some(f) => f,
        None => read_meta(dir)?.unwrap_or(0.0),
    };
    let mut images = Vec::with_capacity(files.len());
    let mut dims = None;
    for file in &files {
        let img = image::open(file)
            .map_err(|e| IngestError::UnreadableFrame {
                path: file.clone(),
                reason: e.to_string(),
            })?
            .into_rgb8();
        match dims {
            None => dims = Some(img.dimensions()),
            Some(expected) if expected != img.dimensions() => {
                return Err(IngestError::InconsistentDimensions {
                    path: file.clone(),
                    expected,
                    found: img.dimensions(),
                })
            }
            _ => {}
        }
        images.push(img);
    }
    VideoClip::from_images(video_id_of(dir), fps, images)
}

/// Writes a clip in the image-directory layout (`%06d.png` plus `meta.json`).
pub fn write_image_directory(clip: &VideoClip, dir: &Path) -> Result<(), IngestError> {
    fs::create_dir_all(dir)?;
    for frame in clip.frames() {
        let path = dir.join(format!("{:06}.png", frame.index));
        fs::write(&path, frame.to_png())?;
    }
    fs::write(
        dir.join("meta.json"),
        serde_json::json!({ "fps": clip.fps }).to_string(),
    )?;
    Ok(())
}
