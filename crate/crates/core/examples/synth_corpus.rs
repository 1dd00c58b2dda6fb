//! Writes a small synthetic corpus (frames, QA items, surprise annotations).
//!
//! cargo run --example synth_corpus -- /tmp/corpus

use vap::synthworld::{generate_corpus, load_annotations, WorldConfig, ANNOTATIONS_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synth-corpus".into());
    let world = WorldConfig {
        frames: 64,
        anomaly_count: 2,
        ..WorldConfig::default()
    };
    let manifest = generate_corpus(&world, 4, 7, out.as_ref())?;
    println!("wrote {} videos to {out}", manifest.count);
    for a in load_annotations(&std::path::Path::new(&out).join(ANNOTATIONS_FILE))? {
        let spans: Vec<String> = a
            .windows
            .iter()
            .map(|w| format!("{}-{} {}", w.start, w.end, w.kind.as_str()))
            .collect();
        println!("{}: {}", a.video_id, spans.join(", "));
    }
    Ok(())
}
