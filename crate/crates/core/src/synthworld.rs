//! Synthetic moving-shape videos with injected surprise events.
//!
//! Objects move at constant velocity and bounce off the walls, so every frame
//! outside an anomaly is an exact function of time. An anomaly starts
//! abruptly at the first frame of its window and fades out linearly by the
//! last: with `w` frames, frame `j` of the window carries weight `(w - j) / w`.
//! During a teleport the displaced copy lands somewhere new on every frame,
//! so anchors inside a window do not explain its neighbours.

use std::io::Write as _;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalharness::{Answer, QAItem};
use crate::ingest::{write_image_directory, IndexSet, IngestError, VideoClip, SPATIAL_STRIDE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad annotation line {line}: {reason}")]
    BadAnnotation { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AnomalyKind {
    ColorFlip,
    Teleport,
    Spawn,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::ColorFlip => "color_flip",
            AnomalyKind::Teleport => "teleport",
            AnomalyKind::Spawn => "spawn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Frames per video.
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub n_objects: usize,
    pub anomaly_count: usize,
    pub anomaly_kind: AnomalyKind,
    pub anomaly_window: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 128,
            width: 128,
            height: 96,
            n_objects: 3,
            anomaly_count: 4,
            anomaly_kind: AnomalyKind::Teleport,
            anomaly_window: 5,
            fps: 8.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.width < SPATIAL_STRIDE || self.height < SPATIAL_STRIDE {
            return bad("width and height must be at least 8");
        }
        if !self.width.is_multiple_of(SPATIAL_STRIDE) || !self.height.is_multiple_of(SPATIAL_STRIDE)
        {
            return bad("width and height must be divisible by 8");
        }
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if self.n_objects == 0 {
            return bad("need at least one object");
        }
        if self.anomaly_count > 0 && self.anomaly_window == 0 {
            return bad("anomaly_window must be positive");
        }
        if self.fps.is_nan() || self.fps <= 0.0 {
            return bad("fps must be positive");
        }
        Ok(())
    }
}

/// Inclusive frame interval `[start, end]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurpriseWindow {
    pub start: usize,
    pub end: usize,
    pub kind: AnomalyKind,
    /// QA item that asks about this window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
}

impl SurpriseWindow {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurpriseAnnotation {
    pub video_id: String,
    pub windows: Vec<SurpriseWindow>,
}

impl SurpriseAnnotation {
    pub fn annotated_frames(&self) -> usize {
        self.windows.iter().map(SurpriseWindow::len).sum()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.windows.iter().any(|w| w.contains(i))
    }
}

/// Fraction of windows with a selected index in `[start - slack, end + slack]`.
/// A video without windows scores 1.
pub fn surprise_recall(selection: &IndexSet, truth: &SurpriseAnnotation, slack: usize) -> f64 {
    if truth.windows.is_empty() {
        return 1.0;
    }
    let hit = truth
        .windows
        .iter()
        .filter(|w| {
            let lo = w.start.saturating_sub(slack);
            let hi = w.end + slack;
            selection.indices().iter().any(|&i| i >= lo && i <= hi)
        })
        .count();
    hit as f64 / truth.windows.len() as f64
}

pub const DEFAULT_RECALL_SLACK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Circle { r: f64 },
    Rect { hw: f64, hh: f64 },
}

impl Shape {
    fn half_extent(self) -> (f64, f64) {
        match self {
            Shape::Circle { r } => (r, r),
            Shape::Rect { hw, hh } => (hw, hh),
        }
    }

    fn covers(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Circle { r } => dx * dx + dy * dy <= r * r,
            Shape::Rect { hw, hh } => dx.abs() <= hw && dy.abs() <= hh,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Circle { .. } => "circle",
            Shape::Rect { .. } => "rectangle",
        }
    }
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    color: [f64; 3],
    color_name: &'static str,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
}

/// Triangle wave keeping `p0 + v t` inside `[lo, hi]`.
fn bounce(p0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (p0 - lo + v * t).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl Object {
    fn position(&self, t: f64, w: f64, h: f64) -> (f64, f64) {
        let (ex, ey) = self.shape.half_extent();
        (
            bounce(self.x0, self.vx, t, ex, w - ex),
            bounce(self.y0, self.vy, t, ey, h - ey),
        )
    }

    fn description(&self) -> String {
        format!("{} {}", self.color_name, self.shape.name())
    }
}

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.92, 0.18, 0.16]),
    ("orange", [0.95, 0.55, 0.12]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("green", [0.20, 0.80, 0.25]),
    ("cyan", [0.15, 0.80, 0.85]),
    ("blue", [0.22, 0.35, 0.95]),
    ("purple", [0.62, 0.28, 0.88]),
    ("pink", [0.95, 0.40, 0.70]),
];

fn random_object(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Object {
    let shape = if rng.random_bool(0.5) {
        Shape::Circle {
            r: rng.random_range(7.0..9.5),
        }
    } else {
        Shape::Rect {
            hw: rng.random_range(6.0..8.5),
            hh: rng.random_range(6.0..8.5),
        }
    };
    let (name, color) = PALETTE[rng.random_range(0..PALETTE.len())];
    let (ex, ey) = shape.half_extent();
    let speed = rng.random_range(0.15..0.45);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    Object {
        shape,
        color,
        color_name: name,
        x0: rng.random_range(ex..w - ex),
        y0: rng.random_range(ey..h - ey),
        vx: speed * angle.cos(),
        vy: speed * angle.sin(),
    }
}

/// What an anomaly draws on frame `j` of its window.
#[derive(Clone, Debug)]
struct AnomalyFrame {
    /// Weight of the anomalous content.
    alpha: f64,
    /// Teleport and spawn: where the anomalous copy is drawn.
    at: (f64, f64),
    /// Colour flip: the replacement colour.
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Anomaly {
    window: SurpriseWindow,
    target: usize,
    spawned: Option<Object>,
    frames: Vec<AnomalyFrame>,
}

/// Sorted window starts with `gap` free frames between windows and none at frame 0.
fn place_windows(
    rng: &mut ChaCha8Rng,
    total: usize,
    count: usize,
    len: usize,
) -> Result<Vec<usize>, SynthError> {
    if count == 0 {
        return Ok(vec![]);
    }
    let gap = len;
    let needed = 1 + count * len + (count - 1) * gap;
    if needed > total {
        return Err(SynthError::InfeasibleConfig(format!(
            "{count} windows of {len} frames need {needed} frames, video has {total}"
        )));
    }
    let free = total - needed;
    // stars and bars: count sorted offsets in 0..=free
    let mut picks = rand::seq::index::sample(rng, free + count, count).into_vec();
    picks.sort_unstable();
    Ok(picks
        .iter()
        .enumerate()
        .map(|(i, &p)| 1 + (p - i) + i * (len + gap))
        .collect())
}

fn far_point(
    rng: &mut ChaCha8Rng,
    from: (f64, f64),
    extent: (f64, f64),
    w: f64,
    h: f64,
) -> (f64, f64) {
    let min_dist = 3.0 * extent.0.max(extent.1);
    let mut best = (extent.0, extent.1);
    let mut best_d = -1.0;
    for _ in 0..32 {
        let p = (
            rng.random_range(extent.0..w - extent.0),
            rng.random_range(extent.1..h - extent.1),
        );
        let d = ((p.0 - from.0).powi(2) + (p.1 - from.1).powi(2)).sqrt();
        if d >= min_dist {
            return p;
        }
        if d > best_d {
            best = p;
            best_d = d;
        }
    }
    best
}

fn other_color(rng: &mut ChaCha8Rng, current: [f64; 3]) -> [f64; 3] {
    let dist = |c: &[f64; 3]| {
        c.iter()
            .zip(&current)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    let mut far: Vec<[f64; 3]> = PALETTE.iter().map(|(_, c)| *c).collect();
    far.sort_by(|a, b| dist(b).total_cmp(&dist(a)));
    far[rng.random_range(0..3)]
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub clip: VideoClip,
    pub annotation: SurpriseAnnotation,
    pub items: Vec<QAItem>,
}

struct Scene {
    w: f64,
    h: f64,
    background: [f64; 3],
    objects: Vec<Object>,
    anomalies: Vec<Anomaly>,
}

const SUPERSAMPLE: usize = 4;

fn draw(
    buf: &mut [f64],
    width: usize,
    height: usize,
    shape: Shape,
    at: (f64, f64),
    color: [f64; 3],
    alpha: f64,
) {
    if alpha <= 0.0 {
        return;
    }
    let (ex, ey) = shape.half_extent();
    let x0 = ((at.0 - ex).floor().max(0.0)) as usize;
    let x1 = ((at.0 + ex).ceil() as usize).min(width);
    let y0 = ((at.1 - ey).floor().max(0.0)) as usize;
    let y1 = ((at.1 + ey).ceil() as usize).min(height);
    let step = 1.0 / SUPERSAMPLE as f64;
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    hits += shape.covers(px - at.0, py - at.1) as usize;
                }
            }
            if hits == 0 {
                continue;
            }
            let a = alpha * hits as f64 / samples;
            let p = &mut buf[(y * width + x) * 3..][..3];
            for c in 0..3 {
                p[c] = p[c] * (1.0 - a) + color[c] * a;
            }
        }
    }
}

impl Scene {
    fn render(&self, t: usize) -> RgbImage {
        let (width, height) = (self.w as usize, self.h as usize);
        let mut buf: Vec<f64> = self
            .background
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        let active: Vec<(&Anomaly, &AnomalyFrame)> = self
            .anomalies
            .iter()
            .filter(|a| a.window.contains(t))
            .map(|a| (a, &a.frames[t - a.window.start]))
            .collect();
        for (i, obj) in self.objects.iter().enumerate() {
            let pos = obj.position(t as f64, self.w, self.h);
            let mut alpha = 1.0;
            let mut color = obj.color;
            let mut ghost = None;
            for (a, f) in active.iter().filter(|(a, _)| a.target == i) {
                match a.window.kind {
                    AnomalyKind::Teleport => {
                        alpha = 1.0 - f.alpha;
                        ghost = Some((f.at, f.alpha));
                    }
                    AnomalyKind::ColorFlip => {
                        for (c, (o, t)) in color.iter_mut().zip(obj.color.iter().zip(&f.color)) {
                            *c = o * (1.0 - f.alpha) + t * f.alpha;
                        }
                    }
                    AnomalyKind::Spawn => {}
                }
            }
            draw(&mut buf, width, height, obj.shape, pos, color, alpha);
            if let Some((at, a)) = ghost {
                draw(&mut buf, width, height, obj.shape, at, obj.color, a);
            }
        }
        for (a, f) in &active {
            if let Some(s) = &a.spawned {
                draw(&mut buf, width, height, s.shape, f.at, s.color, f.alpha);
            }
        }
        RgbImage::from_fn(width as u32, height as u32, |x, y| {
            let p = &buf[(y as usize * width + x as usize) * 3..][..3];
            image::Rgb([0, 1, 2].map(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }
}

const EVENT_DISTRACTORS: [&str; 5] = [
    "The {obj} stops moving for a while",
    "The {obj} splits into two pieces",
    "The {obj} slowly shrinks and disappears",
    "Two objects merge into one",
    "The background suddenly turns bright",
];

fn event_text(kind: AnomalyKind) -> &'static str {
    match kind {
        AnomalyKind::Teleport => "The {obj} suddenly jumps to a different place",
        AnomalyKind::ColorFlip => "The {obj} abruptly changes colour",
        AnomalyKind::Spawn => "A new object briefly appears out of nowhere",
    }
}

fn make_item(
    rng: &mut ChaCha8Rng,
    video_id: &str,
    index: usize,
    a: &Anomaly,
    obj: &Object,
    fps: f64,
) -> QAItem {
    let desc = obj.description();
    let fill = |s: &str| s.replace("{obj}", &desc);
    let correct = fill(event_text(a.window.kind));
    let mut pool: Vec<String> = EVENT_DISTRACTORS.iter().map(|s| fill(s)).collect();
    for k in [
        AnomalyKind::Teleport,
        AnomalyKind::ColorFlip,
        AnomalyKind::Spawn,
    ] {
        if k != a.window.kind {
            pool.push(fill(event_text(k)));
        }
    }
    pool.shuffle(rng);
    let mut options: Vec<String> = pool.into_iter().take(4).collect();
    options.push(correct.clone());
    options.shuffle(rng);
    let answer = options.iter().position(|o| *o == correct).unwrap();
    let t = a.window.start as f64 / fps;
    let question = match a.window.kind {
        AnomalyKind::Spawn => {
            format!("What unusual event happens around {t:.1} seconds into the video?")
        }
        _ => format!(
            "What unusual event involving the {desc} happens around {t:.1} seconds into the video?"
        ),
    };
    QAItem {
        item_id: format!("{video_id}-a{index}"),
        video_id: video_id.into(),
        question,
        options,
        answer: Answer::Choice(answer),
        qtype: Some(a.window.kind.as_str().into()),
    }
}

/// Renders one video with its annotation and QA items; deterministic in `cfg`.
pub fn generate_video(cfg: &WorldConfig, video_id: &str) -> Result<SyntheticVideo, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let tint = rng.random_range(0.0..0.05);
    let background = [0.10 + tint, 0.11, 0.13 - tint];
    let objects: Vec<Object> = (0..cfg.n_objects)
        .map(|_| random_object(&mut rng, w, h))
        .collect();
    let starts = place_windows(&mut rng, cfg.frames, cfg.anomaly_count, cfg.anomaly_window)?;

    let len = cfg.anomaly_window;
    let mut anomalies = Vec::with_capacity(starts.len());
    for (i, &start) in starts.iter().enumerate() {
        let target = rng.random_range(0..objects.len());
        let spawned =
            (cfg.anomaly_kind == AnomalyKind::Spawn).then(|| random_object(&mut rng, w, h));
        let frames = (0..len)
            .map(|j| {
                let t = (start + j) as f64;
                let obj = &objects[target];
                let extent = spawned.as_ref().unwrap_or(obj).shape.half_extent();
                AnomalyFrame {
                    alpha: (len - j) as f64 / len as f64,
                    at: far_point(&mut rng, obj.position(t, w, h), extent, w, h),
                    color: other_color(&mut rng, obj.color),
                }
            })
            .collect();
        anomalies.push(Anomaly {
            window: SurpriseWindow {
                start,
                end: start + len - 1,
                kind: cfg.anomaly_kind,
                item_id: Some(format!("{video_id}-a{i}")),
            },
            target,
            spawned,
            frames,
        });
    }

    let items = anomalies
        .iter()
        .enumerate()
        .map(|(i, a)| {
            make_item(
                &mut rng,
                video_id,
                i,
                a,
                a.spawned.as_ref().unwrap_or(&objects[a.target]),
                cfg.fps,
            )
        })
        .collect();
    let scene = Scene {
        w,
        h,
        background,
        objects,
        anomalies,
    };
    let images: Vec<RgbImage> = (0..cfg.frames).map(|t| scene.render(t)).collect();
    let clip = VideoClip::from_images(video_id, cfg.fps, images)?;
    Ok(SyntheticVideo {
        clip,
        annotation: SurpriseAnnotation {
            video_id: video_id.into(),
            windows: scene.anomalies.into_iter().map(|a| a.window).collect(),
        },
        items,
    })
}

pub fn corpus_video_id(index: usize) -> String {
    format!("vid{index:05}")
}

/// Per-video config: same template, seed `seed + index`.
pub fn corpus_video_config(template: &WorldConfig, seed: u64, index: usize) -> WorldConfig {
    WorldConfig {
        seed: seed.wrapping_add(index as u64),
        ..template.clone()
    }
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const WORLD_FILE: &str = "world.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub template: WorldConfig,
    pub count: usize,
    pub seed: u64,
    pub videos: Vec<String>,
}

/// Writes `<out>/<video_id>/%06d.png` per video plus the annotation and QA manifests.
pub fn generate_corpus(
    template: &WorldConfig,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<CorpusManifest, SynthError> {
    template.validate()?;
    std::fs::create_dir_all(out)?;
    let results: Vec<(SurpriseAnnotation, Vec<QAItem>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = corpus_video_id(i);
            let video = generate_video(&corpus_video_config(template, seed, i), &id)?;
            write_image_directory(&video.clip, &out.join(&id))?;
            Ok((video.annotation, video.items))
        })
        .collect::<Result<_, SynthError>>()?;

    let mut ann = std::io::BufWriter::new(std::fs::File::create(out.join(ANNOTATIONS_FILE))?);
    let mut qa = std::io::BufWriter::new(std::fs::File::create(out.join(QA_FILE))?);
    for (a, items) in &results {
        writeln!(ann, "{}", serde_json::to_string(a).expect("serializable"))?;
        for item in items {
            writeln!(qa, "{}", serde_json::to_string(item).expect("serializable"))?;
        }
    }
    ann.flush()?;
    qa.flush()?;
    let manifest = CorpusManifest {
        template: template.clone(),
        count,
        seed,
        videos: (0..count).map(corpus_video_id).collect(),
    };
    std::fs::write(
        out.join(WORLD_FILE),
        serde_json::to_vec_pretty(&manifest).expect("serializable"),
    )?;
    Ok(manifest)
}

pub fn load_annotations(path: &Path) -> Result<Vec<SurpriseAnnotation>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SynthError::BadAnnotation {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
