//! Compares the built-in predictors on one synthetic video: mean cosine
//! similarity to the real latents inside and outside surprise windows.

use vap::ingest::uniform_sample;
use vap::pipeline::Engine;
use vap::prior::PredictorKind;
use vap::select::Metric;
use vap::synthworld::{generate_video, WorldConfig};

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let video = generate_video(
        &WorldConfig {
            seed: 3,
            ..WorldConfig::default()
        },
        "demo",
    )?;
    let anchors = uniform_sample(video.clip.len(), 16)?;
    println!("{:<16}{:>10}{:>10}", "predictor", "normal", "anomaly");
    for kind in [
        PredictorKind::Hold,
        PredictorKind::Linear,
        PredictorKind::SsimRecursive,
    ] {
        let profile = Engine::builtin(kind).profile(&video.clip, &anchors, None, Metric::Cosine)?;
        let inside = |i: &usize| video.annotation.contains(*i);
        let idx = 0..profile.len();
        let normal = mean(
            idx.clone()
                .filter(|i| !inside(i))
                .map(|i| profile.scores[i]),
        );
        let anomaly = mean(idx.filter(inside).map(|i| profile.scores[i]));
        println!("{:<16}{normal:>10.4}{anomaly:>10.4}", kind.to_string());
    }
    Ok(())
}
