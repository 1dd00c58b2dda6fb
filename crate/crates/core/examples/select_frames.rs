//! Scores one synthetic video and applies every selection policy.

use vap::ingest::uniform_sample;
use vap::pipeline::Engine;
use vap::prior::PredictorKind;
use vap::select::{select, Metric, Policy, SelectOptions};
use vap::synthworld::{generate_video, surprise_recall, WorldConfig, DEFAULT_RECALL_SLACK};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let video = generate_video(
        &WorldConfig {
            seed: 11,
            ..WorldConfig::default()
        },
        "demo",
    )?;
    let windows: Vec<_> = video
        .annotation
        .windows
        .iter()
        .map(|w| (w.start, w.end))
        .collect();
    println!("surprise windows: {windows:?}");

    let total = video.clip.len();
    let anchors = uniform_sample(total, 16)?;
    let profile = Engine::builtin(PredictorKind::Linear).profile(
        &video.clip,
        &anchors,
        None,
        Metric::Cosine,
    )?;
    let opts = SelectOptions {
        exclude: Some(anchors),
        min_gap: 0,
        seed: 1,
    };
    for policy in [
        Policy::MostSurprising,
        Policy::Random,
        Policy::Uniform,
        Policy::LeastSurprising,
    ] {
        let picked = select(policy, total, 8, Some(&profile), &opts)?;
        let recall = surprise_recall(&picked.indices, &video.annotation, DEFAULT_RECALL_SLACK);
        println!(
            "{policy:<18} {:?} recall {recall:.2}",
            picked.indices.indices()
        );
    }
    Ok(())
}
