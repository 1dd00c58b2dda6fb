//! Predicts latents through a generation service speaking the predictor wire
//! protocol. Needs `VAP_PREDICTOR_ENDPOINT`.

use vap::ingest::uniform_sample;
use vap::pipeline::Engine;
use vap::prior::PredictorConfig;
use vap::select::{select_most_surprising, Metric};
use vap::synthworld::{generate_video, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Ok(endpoint) = std::env::var("VAP_PREDICTOR_ENDPOINT") else {
        eprintln!("set VAP_PREDICTOR_ENDPOINT to a predictor service URL");
        return Ok(());
    };
    let engine = Engine::new(
        Default::default(),
        &PredictorConfig::remote(endpoint),
        std::time::Duration::from_secs(1),
        true,
        None,
    )?;
    let video = generate_video(&WorldConfig::default(), "demo")?;
    let anchors = uniform_sample(video.clip.len(), 16)?;
    let profile = engine.profile(&video.clip, &anchors, video.items.first(), Metric::Cosine)?;
    let picked = select_most_surprising(&profile, 8, Some(&anchors), 0)?;
    println!("selected {:?}", picked.indices.indices());
    Ok(())
}
