//! Train a tiny world model, then roll out a multi-scene episode: the latent
//! state is filmed clip by clip, predicted dynamics drive the state forward,
//! and scene breaks re-imagine the world. Also runs the last-frame baseline
//! for comparison and writes GIF previews.
//!
//! Usage: cargo run --release --example rollout_video [OUT_DIR]

use worldfilm::dataset::Dataset;
use worldfilm::rollout::{export_episode, rollout, rollout_lastframe_baseline, RolloutConfig};
use worldfilm::synthworld::simulate_episode;
use worldfilm::train::{run_full_pipeline, PipelineConfig};
use worldfilm::util::derive_seed;

fn main() -> worldfilm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example-out/rollout".into());
    let cfg = PipelineConfig::tiny_demo();
    let data = Dataset::generate(&cfg.world, 8, derive_seed(cfg.seed, "dataset"))?;
    println!("training tiny world model...");
    let (wm, _) = run_full_pipeline(cfg, &data)?;

    let start = simulate_episode(&wm.cfg.world, 99)?;
    let rcfg = RolloutConfig {
        clips: 4,
        scene_breaks: vec![2],
        overrides: vec![(3, "blue cross moves_up".split(' ').map(String::from).collect())],
        temperature: 0.0,
        sample_steps: 8,
        guidance: 1.0,
        max_words: 7,
        seed: 5,
    };

    let trace = rollout(&wm, &start.initial_frame, &start.initial_caption, &rcfg)?;
    println!("prompt: {}", start.initial_caption.text());
    for (t, words) in trace.dynamics.iter().enumerate() {
        let marker = if trace.scene_breaks[t] { " (new scene)" } else { "" };
        println!("clip {t}{marker}: {}", words.join(" "));
    }
    let gifs = export_episode(&wm, &start.initial_caption, &trace, out.as_ref())?;
    println!("wrote {} scene previews to {out}: {gifs:?}", gifs.len());

    let base = rollout_lastframe_baseline(&wm, &start.initial_frame, &start.initial_caption, &rcfg)?;
    let base_dir = format!("{out}-baseline");
    export_episode(&wm, &start.initial_caption, &base, base_dir.as_ref())?;
    println!("baseline (no latent state) written to {base_dir}");
    Ok(())
}
