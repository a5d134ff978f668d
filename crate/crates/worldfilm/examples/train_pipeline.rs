//! Run the full four-stage training scheme on a tiny configuration and save
//! a checkpoint: decoder pretraining, state-text alignment, generative
//! pretraining, and joint world-model finetuning with adapters.
//!
//! Usage: cargo run --release --example train_pipeline [OUT_DIR]

use worldfilm::dataset::Dataset;
use worldfilm::train::{load_checkpoint, run_full_pipeline, save_checkpoint, PipelineConfig};
use worldfilm::util::derive_seed;

fn main() -> worldfilm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example-out/checkpoint".into());
    let cfg = PipelineConfig::tiny_demo();
    let data = Dataset::generate(&cfg.world, 8, derive_seed(cfg.seed, "dataset"))?;
    println!("training on {} episodes ({} held out)", data.episodes.len(), 1.max(8 / 10));

    let (wm, reports) = run_full_pipeline(cfg, &data)?;
    for r in &reports {
        println!(
            "stage {}: {} iterations, final loss {:.4}, holdout {:.4}",
            r.stage,
            r.losses.len(),
            r.losses.last().copied().unwrap_or(f64::NAN),
            r.holdout_loss
        );
    }

    save_checkpoint(&wm, out.as_ref())?;
    let back = load_checkpoint(out.as_ref())?;
    assert_eq!(back.stage, wm.stage);
    println!("checkpoint saved to {out} and reloaded (stage {})", back.stage);
    Ok(())
}
