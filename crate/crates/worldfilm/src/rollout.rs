//! Rollout engine: generates long videos clip by clip. The sequence model
//! carries the latent state forward; the diffusion decoder films each state;
//! generated observations and predicted dynamics are fed back into the
//! sequence. A last-frame baseline without the latent state is included for
//! comparison.

use std::fs;
use std::path::Path;

use crate::autodiff::Mat;
use crate::diffusion::{clip_to_frames, frame_to_pixels, sample_clip};
use crate::error::{Error, Result};
use crate::seqmodel::{sample_dynamics, Element, InferSession};
use crate::synthworld::{segment_video, Caption, Episode, Frame};
use crate::tokenize::Special;
use crate::train::WorldModel;
use crate::util::derive_seed;

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    /// Number of clips to generate.
    pub clips: usize,
    /// Clip indices at which a new scene starts (the previous-observation
    /// condition is dropped there).
    pub scene_breaks: Vec<usize>,
    /// Dynamics overrides: `(clip index, caption words)` applied verbatim
    /// instead of sampling.
    pub overrides: Vec<(usize, Vec<String>)>,
    /// Dynamics sampling temperature; 0 = greedy.
    pub temperature: f64,
    /// Ancestral sampling steps for the decoder.
    pub sample_steps: usize,
    pub guidance: f64,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            clips: 6,
            scene_breaks: vec![],
            overrides: vec![],
            temperature: 0.0,
            sample_steps: 40,
            guidance: 2.0,
            max_words: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub clips: Vec<Vec<Frame>>,
    /// Predicted (or overridden) dynamics words per clip.
    pub dynamics: Vec<Vec<String>>,
    pub scene_breaks: Vec<bool>,
    /// Latent state used to decode each clip.
    pub states: Vec<Mat>,
    /// Every element appended to the sequence, for auditing.
    pub elements: Vec<Element>,
    /// True when any dynamics sample hit the word budget before EOD.
    pub truncated: bool,
}

fn override_for<'c>(cfg: &'c RolloutConfig, t: usize) -> Option<&'c [String]> {
    cfg.overrides.iter().find(|(i, _)| *i == t).map(|(_, w)| w.as_slice())
}

/// World-model rollout from an initial frame and a prompt caption.
pub fn rollout(wm: &WorldModel, init_frame: &Frame, prompt: &Caption, cfg: &RolloutConfig) -> Result<RolloutTrace> {
    if cfg.clips == 0 {
        return Err(Error::Argument("rollout needs at least one clip".into()));
    }
    if cfg.temperature < 0.0 || cfg.sample_steps == 0 {
        return Err(Error::Argument("bad sampling settings".into()));
    }
    let vocab = &wm.vocab;
    let palette = crate::synthworld::palette_colors(wm.cfg.world.palette_size);
    let q = wm.cfg.model.q_slots;

    let mut session = InferSession::new(&wm.model);
    let mut elements: Vec<Element> = Vec::new();
    let push =
        |session: &mut InferSession, elements: &mut Vec<Element>, es: &[Element]| -> Result<Mat> {
            elements.extend_from_slice(es);
            session.append(es)
        };

    let mut prefix = vec![
        Element::Token(vocab.special(Special::Bos)),
        Element::Token(vocab.special(Special::Img)),
    ];
    prefix.extend(vocab.tokenize_frame(init_frame)?.into_iter().map(Element::Token));
    prefix.extend(vocab.tokenize_text(prompt)?.into_iter().map(Element::Token));
    push(&mut session, &mut elements, &prefix)?;

    let mut o_prev: Option<Mat> = Some(frame_to_pixels(init_frame, &palette));
    let mut clips = Vec::with_capacity(cfg.clips);
    let mut dynamics = Vec::with_capacity(cfg.clips);
    let mut breaks = Vec::with_capacity(cfg.clips);
    let mut states = Vec::with_capacity(cfg.clips);
    let mut truncated = false;

    for t in 0..cfg.clips {
        let is_break = cfg.scene_breaks.contains(&t);
        breaks.push(is_break);
        if is_break {
            o_prev = None;
            push(
                &mut session,
                &mut elements,
                &[Element::Token(vocab.special(Special::NullCond))],
            )?;
        }
        let state_elems: Vec<Element> = (0..q).map(Element::StateQuery).collect();
        let state = push(&mut session, &mut elements, &state_elems)?;
        states.push(state.clone());

        let clip_seed = derive_seed(cfg.seed, &format!("rollout.clip{t}"));
        let clip = sample_clip(
            &wm.decoder,
            &wm.schedule,
            Some(&state),
            o_prev.as_ref(),
            cfg.sample_steps,
            clip_seed,
            cfg.guidance,
        )?;
        let frames = clip_to_frames(&clip, &palette);
        o_prev = Some(frame_to_pixels(frames.last().unwrap(), &palette));

        // feed the generated key frames back as the observation
        let mut obs = vec![Element::Token(vocab.special(Special::Boc))];
        let segs = segment_video(&frames, frames.len())?;
        for f in crate::synthworld::sample_key_frames(&segs[0], wm.cfg.key_frames_per_clip)? {
            obs.extend(vocab.tokenize_frame(&f)?.into_iter().map(Element::Token));
        }
        obs.push(Element::Token(vocab.special(Special::Eoc)));
        push(&mut session, &mut elements, &obs)?;
        clips.push(frames);

        let bod_hidden = push(
            &mut session,
            &mut elements,
            &[Element::Token(vocab.special(Special::Bod))],
        )?;
        let words: Vec<String> = if let Some(over) = override_for(cfg, t) {
            let cap = Caption::new(over.to_vec())?;
            let ids = vocab.tokenize_text(&cap)?;
            let mut es: Vec<Element> = ids.into_iter().map(Element::Token).collect();
            es.push(Element::Token(vocab.special(Special::Eod)));
            push(&mut session, &mut elements, &es)?;
            over.to_vec()
        } else {
            let dyn_seed = derive_seed(cfg.seed, &format!("rollout.dyn{t}"));
            let before = elements.len();
            let out = sample_dynamics(
                &mut session,
                &bod_hidden,
                vocab,
                cfg.temperature,
                dyn_seed,
                cfg.max_words,
            )?;
            // mirror the session-internal appends into the audit log
            let _ = before;
            for &id in &out.tokens {
                elements.push(Element::Token(id));
            }
            elements.push(Element::Token(vocab.special(Special::Eod)));
            truncated |= out.truncated;
            out.tokens
                .iter()
                .map(|&id| vocab.word_of(id).map(|w| w.to_string()))
                .collect::<Result<Vec<_>>>()?
        };
        dynamics.push(words);
    }

    Ok(RolloutTrace { clips, dynamics, scene_breaks: breaks, states, elements, truncated })
}

/// Baseline without the latent world state: every clip is decoded under the
/// null state condition from the last generated frame. It follows the same
/// conditioning schedule as the state rollout (a scheduled scene break drops
/// the previous-frame condition), so the comparison is a controlled ablation
/// of the state alone.
pub fn rollout_lastframe_baseline(
    wm: &WorldModel,
    init_frame: &Frame,
    prompt: &Caption,
    cfg: &RolloutConfig,
) -> Result<RolloutTrace> {
    if cfg.clips == 0 {
        return Err(Error::Argument("rollout needs at least one clip".into()));
    }
    let palette = crate::synthworld::palette_colors(wm.cfg.world.palette_size);
    let mut o_prev = Some(frame_to_pixels(init_frame, &palette));
    let mut clips = Vec::with_capacity(cfg.clips);
    let mut breaks = Vec::with_capacity(cfg.clips);
    for t in 0..cfg.clips {
        let is_break = cfg.scene_breaks.contains(&t);
        breaks.push(is_break);
        if is_break {
            // Same conditioning rule as the state rollout: a scheduled scene
            // break drops the previous-frame condition. The two rollouts then
            // differ in exactly one thing - the latent state.
            o_prev = None;
        }
        let clip_seed = derive_seed(cfg.seed, &format!("baseline.clip{t}"));
        // No latent state and no text condition (null state condition): pure
        // last-frame autoregression.
        let clip = sample_clip(
            &wm.decoder,
            &wm.schedule,
            None,
            o_prev.as_ref(),
            cfg.sample_steps,
            clip_seed,
            cfg.guidance,
        )?;
        let frames = clip_to_frames(&clip, &palette);
        o_prev = Some(frame_to_pixels(frames.last().unwrap(), &palette));
        clips.push(frames);
    }
    Ok(RolloutTrace {
        clips,
        dynamics: vec![prompt.words.clone(); cfg.clips],
        scene_breaks: breaks,
        states: vec![],
        elements: vec![],
        truncated: false,
    })
}

/// Write a rollout as a dataset-format episode plus one GIF preview per scene.
pub fn export_episode(
    wm: &WorldModel,
    prompt: &Caption,
    trace: &RolloutTrace,
    dir: &Path,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut clips = Vec::new();
    let mut scene = 0usize;
    for (i, frames) in trace.clips.iter().enumerate() {
        if i > 0 && trace.scene_breaks[i] {
            scene += 1;
        }
        clips.push(crate::synthworld::Clip { frames: frames.clone(), scene_id: scene, clip_index: i });
    }
    let episode = Episode {
        // the dataset format derives the initial frame from clip 0
        initial_frame: trace.clips[0][0].clone(),
        initial_caption: prompt.clone(),
        // generated captions may fall outside the grammar; store them as-is
        captions: trace.dynamics.iter().map(|w| Caption { words: w.clone() }).collect(),
        clips,
        scene_breaks: trace.scene_breaks.clone(),
    };
    let ds = crate::dataset::Dataset {
        config: wm.cfg.world.clone(),
        seeds: vec![],
        episodes: vec![episode],
    };
    crate::dataset::write_dataset(&ds, dir)?;

    let palette = crate::synthworld::palette_colors(wm.cfg.world.palette_size);
    let mut gifs = Vec::new();
    let n_scenes = trace.scene_breaks.iter().filter(|&&b| b).count() + 1;
    let mut scene_frames: Vec<Vec<&Frame>> = vec![Vec::new(); n_scenes];
    let mut scene = 0usize;
    for (i, frames) in trace.clips.iter().enumerate() {
        if i > 0 && trace.scene_breaks[i] {
            scene += 1;
        }
        scene_frames[scene].extend(frames.iter());
    }
    for (s, frames) in scene_frames.iter().enumerate() {
        let name = format!("scene_{s:02}.gif");
        write_gif(&dir.join(&name), frames, &palette, 16)?;
        gifs.push(name);
    }
    Ok(gifs)
}

/// Encode frames as an animated GIF, scaled up by `scale`.
pub fn write_gif(path: &Path, frames: &[&Frame], palette: &[[f64; 3]], scale: u32) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyResult("no frames to encode".into()));
    }
    let file = fs::File::create(path)?;
    let mut enc = image::codecs::gif::GifEncoder::new(file);
    enc.set_repeat(image::codecs::gif::Repeat::Infinite)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for f in frames {
        let (h, w) = (f.height() as u32, f.width() as u32);
        let img = image::RgbaImage::from_fn(w * scale, h * scale, |x, y| {
            let p = f.grid[[(y / scale) as usize, (x / scale) as usize]] as usize;
            let c = palette[p];
            let to8 = |v: f64| (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgba([to8(c[0]), to8(c[1]), to8(c[2]), 255])
        });
        let frame =
            image::Frame::from_parts(img, 0, 0, image::Delay::from_numer_denom_ms(250, 1));
        enc.encode_frame(frame).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::train::{micro_pipeline_config, WorldModel};

    fn micro_world() -> (WorldModel, Frame, Caption) {
        let cfg = micro_pipeline_config();
        let data = Dataset::generate(&cfg.world, 1, 3).unwrap();
        let wm = WorldModel::init(cfg).unwrap();
        let ep = &data.episodes[0];
        (wm, ep.initial_frame.clone(), ep.initial_caption.clone())
    }

    fn quick_cfg() -> RolloutConfig {
        RolloutConfig { clips: 3, sample_steps: 4, seed: 11, ..Default::default() }
    }

    #[test]
    fn rollout_shapes_and_determinism() {
        let (wm, init, prompt) = micro_world();
        let cfg = quick_cfg();
        let a = rollout(&wm, &init, &prompt, &cfg).unwrap();
        assert_eq!(a.clips.len(), 3);
        assert_eq!(a.dynamics.len(), 3);
        assert_eq!(a.states.len(), 3);
        for frames in &a.clips {
            assert_eq!(frames.len(), wm.cfg.world.frames_per_clip);
            assert_eq!(frames[0].height(), wm.cfg.world.height);
        }
        for st in &a.states {
            assert_eq!(st.dim(), (wm.cfg.model.q_slots, wm.cfg.model.d_model));
        }
        let b = rollout(&wm, &init, &prompt, &cfg).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.dynamics, b.dynamics);
        let c = rollout(&wm, &init, &prompt, &RolloutConfig { seed: 12, ..quick_cfg() }).unwrap();
        assert_ne!(a.clips, c.clips);
    }

    #[test]
    fn scene_breaks_emit_null_marker_before_state_block() {
        let (wm, init, prompt) = micro_world();
        let cfg = RolloutConfig { scene_breaks: vec![1], ..quick_cfg() };
        let tr = rollout(&wm, &init, &prompt, &cfg).unwrap();
        assert_eq!(tr.scene_breaks, vec![false, true, false]);
        let null = Element::Token(wm.vocab.special(Special::NullCond));
        let count = tr.elements.iter().filter(|&&e| e == null).count();
        assert_eq!(count, 1);
        // the NULL marker is immediately followed by the state queries
        let at = tr.elements.iter().position(|&e| e == null).unwrap();
        assert_eq!(tr.elements[at + 1], Element::StateQuery(0));
    }

    #[test]
    fn overrides_are_used_verbatim() {
        let (wm, init, prompt) = micro_world();
        let words: Vec<String> =
            ["red", "square", "moves_left"].iter().map(|s| s.to_string()).collect();
        let cfg = RolloutConfig { overrides: vec![(1, words.clone())], ..quick_cfg() };
        let tr = rollout(&wm, &init, &prompt, &cfg).unwrap();
        assert_eq!(tr.dynamics[1], words);
    }

    #[test]
    fn baseline_is_deterministic_and_stateless() {
        let (wm, init, prompt) = micro_world();
        let cfg = RolloutConfig { scene_breaks: vec![1], ..quick_cfg() };
        let a = rollout_lastframe_baseline(&wm, &init, &prompt, &cfg).unwrap();
        assert_eq!(a.clips.len(), 3);
        assert!(a.states.is_empty());
        let b = rollout_lastframe_baseline(&wm, &init, &prompt, &cfg).unwrap();
        assert_eq!(a.clips, b.clips);
    }

    #[test]
    fn export_writes_dataset_and_per_scene_gifs() {
        let (wm, init, prompt) = micro_world();
        let words: Vec<String> =
            ["red", "square", "moves_left"].iter().map(|s| s.to_string()).collect();
        let cfg = RolloutConfig {
            scene_breaks: vec![2],
            overrides: (0..3).map(|t| (t, words.clone())).collect(),
            ..quick_cfg()
        };
        let tr = rollout(&wm, &init, &prompt, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gifs = export_episode(&wm, &prompt, &tr, dir.path()).unwrap();
        assert_eq!(gifs.len(), 2, "one gif per scene");
        for g in &gifs {
            assert!(dir.path().join(g).exists());
        }
        let back = crate::dataset::read_dataset(dir.path()).unwrap();
        assert_eq!(back.episodes.len(), 1);
        assert_eq!(back.episodes[0].clips.len(), 3);
        assert_eq!(back.episodes[0].captions[1].words, words);
    }

    #[test]
    fn zero_clips_rejected() {
        let (wm, init, prompt) = micro_world();
        let cfg = RolloutConfig { clips: 0, ..quick_cfg() };
        assert!(rollout(&wm, &init, &prompt, &cfg).is_err());
    }
}
