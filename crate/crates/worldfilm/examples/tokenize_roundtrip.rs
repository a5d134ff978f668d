//! Show the mixed-modality token vocabulary: frames and grammar captions
//! tokenize into one id space and decode back exactly.
//!
//! Usage: cargo run --release --example tokenize_roundtrip

use worldfilm::synthworld::{simulate_episode, WorldConfig};
use worldfilm::tokenize::Vocabulary;

fn main() -> worldfilm::Result<()> {
    let cfg = WorldConfig::default();
    let vocab = Vocabulary::new(cfg.palette_size);
    println!(
        "vocabulary: {} ids (text {:?}, visual {:?})",
        vocab.size(),
        vocab.text_range(),
        vocab.visual_range()
    );

    let ep = simulate_episode(&cfg, 3)?;

    let caption = &ep.initial_caption;
    let ids = vocab.tokenize_text(caption)?;
    println!("caption \"{}\" -> {ids:?}", caption.text());
    let back = vocab.detokenize_text(&ids)?;
    assert_eq!(&back, caption);

    let frame = &ep.initial_frame;
    let ids = vocab.tokenize_frame(frame)?;
    println!("{}x{} frame -> {} visual ids", frame.height(), frame.width(), ids.len());
    let back = vocab.detokenize_frame(&ids, frame.height(), frame.width())?;
    assert_eq!(&back, frame);

    println!("both modalities round-trip exactly");
    Ok(())
}
