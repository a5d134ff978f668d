//! Score episodes with the toy video-quality metrics and emit a deterministic
//! report with plots.
//!
//! Usage: cargo run --release --example evaluate_metrics [OUT_DIR]

use worldfilm::eval::{emit_report, evaluate_episode, BigramModel, MetricReport};
use worldfilm::synthworld::{palette_colors, simulate_episode, WorldConfig};

fn main() -> worldfilm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example-out/report".into());
    let cfg = WorldConfig::default();
    let palette = palette_colors(cfg.palette_size);
    let seeds: Vec<u64> = (0..6).collect();
    let episodes: Vec<_> = seeds
        .iter()
        .map(|&s| simulate_episode(&cfg, s))
        .collect::<worldfilm::Result<_>>()?;

    // truth scored against itself: consistency metrics reflect the scripted
    // world, dynamics accuracy is trivially 1
    let exact: Vec<_> = episodes
        .iter()
        .map(|e| evaluate_episode(e, &e.captions, &palette))
        .collect::<worldfilm::Result<_>>()?;
    let truth = MetricReport::from_episodes("truth", "scripted-world", &seeds, exact)?;

    // a bigram language model as a cheap dynamics predictor
    let bigram = BigramModel::train(&episodes);
    let mut scored = Vec::new();
    for ep in &episodes {
        let mut predicted = ep.clone();
        let mut prev = ep.initial_caption.words.clone();
        for cap in predicted.captions.iter_mut() {
            let guess = bigram.predict_next(&prev, 7);
            prev = cap.words.clone();
            cap.words = guess;
        }
        scored.push(evaluate_episode(&predicted, &ep.captions, &palette)?);
    }
    let bigram_report = MetricReport::from_episodes("bigram", "scripted-world", &seeds, scored)?;

    for r in [&truth, &bigram_report] {
        println!(
            "{}: dynamics accuracy {:.3}, subject consistency {:.3}",
            r.mode,
            r.aggregate["dynamics_accuracy"].mean,
            r.aggregate["subject_consistency"].mean
        );
    }

    let files = emit_report(&[truth, bigram_report], out.as_ref())?;
    println!("wrote {} report files to {out}", files.len());
    Ok(())
}
