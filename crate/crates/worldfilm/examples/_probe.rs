use std::collections::BTreeMap;
use worldfilm::autodiff::Tape;
use worldfilm::dataset::Dataset;
use worldfilm::eval::subject_consistency;
use worldfilm::rollout::{rollout, rollout_lastframe_baseline, RolloutConfig};
use worldfilm::synthworld::{simulate_episode};
use worldfilm::train::load_checkpoint;
use worldfilm::util::derive_seed;

fn main() -> worldfilm::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "/tmp/deskrun3/checkpoints".into());
    let episodes: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(120);
    let guidance: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let wm = load_checkpoint(dir.as_ref())?;
    let data = Dataset::generate(&wm.cfg.world, episodes, derive_seed(wm.cfg.seed, "dataset"))?;
    let n = data.episodes.len();
    let h = 1usize.max(n / 10);
    let holdout = if std::env::args().nth(4).as_deref() == Some("train") {
        &data.episodes[..24]
    } else {
        &data.episodes[n - h..]
    };
    let acc = wm.dynamics_token_accuracy(holdout)?;
    println!("holdout dynamics token accuracy: {acc:.4}");

    // per-target-word breakdown
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ep in holdout {
        let seq = wm.episode_worldmodel_sequence(ep)?;
        let mut tape = Tape::new();
        let out = wm.model.forward(&mut tape, &seq, true)?;
        let logits = tape.value(out.logits.unwrap()).clone();
        for span in &seq.triplets {
            for (&pos, &target) in span.dyn_logit_positions.iter().zip(&span.dyn_targets) {
                let row = logits.row(pos);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() { if v > row[best] { best = j; } }
                let name = wm.vocab.word_of(target).unwrap_or("<EOD>").to_string();
                let e = hits.entry(name).or_insert((0, 0));
                e.1 += 1;
                if best as u32 == target { e.0 += 1; }
            }
        }
    }
    let mut items: Vec<_> = hits.into_iter().collect();
    items.sort_by(|a, b| ((a.1).0 as f64 / (a.1).1 as f64).partial_cmp(&((b.1).0 as f64 / (b.1).1 as f64)).unwrap());
    for (w, (h, t)) in items { println!("  {w:<14} {h}/{t} = {:.3}", h as f64 / t as f64); }

    let mut wins = 0;
    let mut gaps = vec![];
    for seed in 0..8u64 {
        let start = simulate_episode(&wm.cfg.world, 1000 + seed)?;
        let rcfg = RolloutConfig {
            clips: 6, scene_breaks: vec![2, 4], overrides: vec![],
            temperature: 0.0, sample_steps: 40, guidance, max_words: 7, seed,
        };
        let tr = rollout(&wm, &start.initial_frame, &start.initial_caption, &rcfg)?;
        let tb = rollout_lastframe_baseline(&wm, &start.initial_frame, &start.initial_caption, &rcfg)?;
        let sc = |t: &worldfilm::rollout::RolloutTrace| {
            let frames: Vec<&worldfilm::synthworld::Frame> = t.clips.iter().flatten().collect();
            subject_consistency(&frames)
        };
        let (a, b) = (sc(&tr), sc(&tb));
        gaps.push(a - b);
        if a > b { wins += 1; }
        println!("seed {seed}: state {a:.4} baseline {b:.4} dyn: {}", tr.dynamics.iter().map(|w| w.join(" ")).collect::<Vec<_>>().join(" | "));
    }
    println!("wins {wins}/8, mean gap {:.4}", gaps.iter().sum::<f64>() / gaps.len() as f64);
    Ok(())
}
