//! Low-rank adapters on the sequence model's attention projections: zero
//! initialization leaves the forward pass unchanged, and merging folds the
//! adapters back into the base weights exactly.
//!
//! Usage: cargo run --release --example lora_adapters

use worldfilm::autodiff::Tape;
use worldfilm::seqmodel::{build_alignment_sequence, ModelConfig, SeqModel};
use worldfilm::synthworld::{sample_key_frames, simulate_episode, WorldConfig};
use worldfilm::tokenize::Vocabulary;
use worldfilm::util::derive_rng;

fn main() -> worldfilm::Result<()> {
    let world = WorldConfig::default();
    let vocab = Vocabulary::new(world.palette_size);
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        q_slots: 8,
        max_seq_len: 1024,
        visual_base: vocab.visual_base(),
        frame_cells: 16,
        run_frames: 2,
    };
    let mut rng = derive_rng(1, "example.init");
    let mut model = SeqModel::new(cfg, &mut rng)?;
    println!("adapter targets: {:?}", model.lora_targets());

    let ep = simulate_episode(&world, 0)?;
    let init = vocab.tokenize_frame(&ep.initial_frame)?;
    let captions = ep
        .captions
        .iter()
        .map(|c| vocab.tokenize_text(c))
        .collect::<worldfilm::Result<Vec<_>>>()?;
    let observations = ep
        .clips
        .iter()
        .map(|clip| {
            let kf = sample_key_frames(clip, 1)?;
            let mut ids = Vec::new();
            for f in &kf {
                ids.extend(vocab.tokenize_frame(f)?);
            }
            Ok(ids)
        })
        .collect::<worldfilm::Result<Vec<_>>>()?;
    let seq = build_alignment_sequence(&vocab, &init, &captions, &observations, 8)?;

    let mut tape = Tape::new();
    let before = model.forward(&mut tape, &seq, false)?;
    let before = tape.value(before.hidden).clone();

    let mut rng = derive_rng(1, "example.lora");
    model.apply_lora(4, 1.0, &mut rng)?;
    let mut tape = Tape::new();
    let zeroed = model.forward(&mut tape, &seq, false)?;
    let zeroed = tape.value(zeroed.hidden).clone();
    let diff = (&before - &zeroed).mapv(f64::abs).sum();
    println!("output change after zero-init adapters: {diff} (exactly 0 expected)");
    assert_eq!(diff, 0.0);

    // perturb one adapter and merge: the merged base reproduces the adapted
    // forward pass without adapter weights
    let key = "lora.l0.sa.wq.a".to_string();
    model.params.get_mut(&key).mapv_inplace(|_| 0.01);
    let mut tape = Tape::new();
    let adapted = model.forward(&mut tape, &seq, false)?;
    let adapted = tape.value(adapted.hidden).clone();

    model.merge_lora()?;
    let mut tape = Tape::new();
    let merged = model.forward(&mut tape, &seq, false)?;
    let merged = tape.value(merged.hidden).clone();
    let err = (&adapted - &merged).mapv(f64::abs).iter().fold(0.0f64, |a, &b| a.max(b));
    println!("max |adapted - merged| = {err:.3e}");
    assert!(err < 1e-9);
    println!("adapters merged exactly; model is adapter-free again");
    Ok(())
}
