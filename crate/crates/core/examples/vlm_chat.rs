//! Asks an OpenAI-compatible vision model one question over selected frames.
//! Needs `VAP_VLM_ENDPOINT`, and usually `VAP_VLM_MODEL` and `VAP_VLM_KEY`.

use vap::evalharness::SchemaId;
use vap::ingest::uniform_sample;
use vap::synthworld::{generate_video, WorldConfig};
use vap::vlmclient::{parse_answer, render_prompt, Completion, PromptTemplate, VlmClient};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(client) = VlmClient::from_env() else {
        eprintln!("set VAP_VLM_ENDPOINT (and VAP_VLM_MODEL, VAP_VLM_KEY)");
        return Ok(());
    };
    let video = generate_video(&WorldConfig::default(), "demo")?;
    let item = &video.items[0];
    let frames = video.clip.select(&uniform_sample(video.clip.len(), 8)?);
    let template = SchemaId::Synth.template_for(item);
    let req = render_prompt(&PromptTemplate::builtin(template), item, &frames)?;
    match client.complete(&req)? {
        Completion::Text { text } => println!(
            "{text}\n-> {:?}",
            parse_answer(&text, template).map(|p| p.value)
        ),
        Completion::Blocked { reason } => println!("blocked: {reason}"),
    }
    Ok(())
}
