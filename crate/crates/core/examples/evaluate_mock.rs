//! End-to-end run over a small in-memory corpus, answered by the mock oracle.

use std::collections::HashMap;

use vap::ingest::ShiftDirection;
use vap::pipeline::{evaluate_selections, Engine, PipelineConfig, SelectionPlan};
use vap::prior::PredictorKind;
use vap::select::{Metric, Policy};
use vap::synthworld::{corpus_video_config, corpus_video_id, generate_video, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = Engine::builtin(PredictorKind::Linear);
    let policies = vec![Policy::MostSurprising, Policy::Uniform, Policy::Random];
    let plan = SelectionPlan {
        n: 8,
        k: 16,
        shift: ShiftDirection::Middle,
        metric: Metric::Cosine,
        policies: policies.clone(),
        exclude_initial: true,
        min_gap: 0,
        seed: 0,
    };
    let (mut items, mut records, mut annotations) = (Vec::new(), Vec::new(), HashMap::new());
    for i in 0..12 {
        let id = corpus_video_id(i);
        let video = generate_video(&corpus_video_config(&WorldConfig::default(), 100, i), &id)?;
        records.extend(engine.select_video(&video.clip, None, &plan)?.records);
        annotations.insert(id, video.annotation);
        items.extend(video.items);
    }
    let cfg = PipelineConfig {
        policies,
        ..PipelineConfig::default()
    };
    let out = evaluate_selections(&cfg, &items, &records, &annotations, &cfg.backend()?)?;
    for run in out.runs {
        print!("{}", run.report.to_text());
        println!(
            "surprise recall: {:.3}\n",
            run.surprise_recall.unwrap_or_default()
        );
    }
    Ok(())
}
