//! Simulate the scripted moving-shapes world and write a dataset to disk.
//!
//! Usage: cargo run --release --example generate_dataset [OUT_DIR]

use worldfilm::dataset::{read_dataset, write_dataset, Dataset};
use worldfilm::synthworld::WorldConfig;

fn main() -> worldfilm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example-out/dataset".into());
    let cfg = WorldConfig::default();
    let data = Dataset::generate(&cfg, 5, 42)?;

    for (i, ep) in data.episodes.iter().enumerate() {
        println!(
            "episode {i}: {} clips, {} scenes, opens with \"{}\"",
            ep.clips.len(),
            ep.scene_breaks.iter().filter(|&&b| b).count() + 1,
            ep.initial_caption.text()
        );
        for (c, cap) in ep.captions.iter().enumerate() {
            println!("  clip {c}: {}", cap.text());
        }
    }

    let manifest = write_dataset(&data, out.as_ref())?;
    println!("wrote {} episodes to {out} (digest {})", manifest.episode_count, manifest.digest);

    // round-trip check: the reader reconstructs the exact same episodes
    let back = read_dataset(out.as_ref())?;
    assert_eq!(back.episodes, data.episodes);
    println!("read back {} episodes bit-for-bit", back.episodes.len());
    Ok(())
}
