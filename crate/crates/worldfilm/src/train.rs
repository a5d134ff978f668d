//! Four-stage training pipeline and checkpointing.
//!
//! Stage 0 pretrains the diffusion decoder together with the text encoder.
//! Stage 1 aligns the sequence model's latent states to text encodings.
//! Stage 2 pretrains the sequence model generatively on mixed sequences.
//! Stage 3 trains the full world model (dynamics + decoding through states).

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::dataset::Dataset;
use crate::diffusion::{
    frame_to_pixels, frames_to_clip, DecoderConfig, DecoderNet, NoiseSchedule,
    ScheduleConfig, StateCond,
};
use crate::error::{Error, Result};
use crate::nn::{ParamSpec, ParamStore};
use crate::seqmodel::{
    build_alignment_sequence, build_worldmodel_sequence, MixedSequence, ModelConfig, SeqModel,
    TripletInput,
};
use crate::synthworld::{palette_colors, sample_key_frames, Episode, WorldConfig};
use crate::textenc::{TextEncoder, TextEncoderConfig};
use crate::tokenize::Vocabulary;
use crate::util::{derive_rng, sha256_hex};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Condition dropout probability (decoder stages).
    pub p_drop: f64,
    /// Weight of the dynamics loss (stage 3).
    pub lambda_dyn: f64,
    /// Weight of the denoising loss (stage 3).
    pub lambda_denoise: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { iterations: 100, lr: 1e-3, p_drop: 0.1, lambda_dyn: 1.0, lambda_denoise: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub decoder: DecoderConfig,
    pub textenc: TextEncoderConfig,
    pub schedule: ScheduleConfig,
    pub key_frames_per_clip: usize,
    /// Stage-2 sequences cover this many consecutive clips per step
    /// (0 = whole episodes). Window starts and positional offsets are
    /// randomized per step.
    #[serde(default)]
    pub stage2_window_clips: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// When true, stage 3 updates only the adapters in the sequence model.
    pub lora_only: bool,
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub seed: u64,
}

impl PipelineConfig {
    /// Desk-scale defaults sized so the whole pipeline runs on a CPU in
    /// minutes.
    pub fn desk_default() -> Self {
        let world = WorldConfig::default();
        let vocab = Vocabulary::new(world.palette_size);
        let d_model = 64;
        let q_slots = 16;
        Self {
            model: ModelConfig {
                vocab_size: vocab.size(),
                d_model,
                n_layers: 3,
                n_heads: 4,
                q_slots,
                max_seq_len: 2048,
                visual_base: vocab.visual_base(),
                frame_cells: world.height * world.width,
                run_frames: 4,
            },
            decoder: DecoderConfig {
                d_dec: 48,
                n_blocks: 2,
                n_heads: 4,
                d_state: d_model,
                frames: world.frames_per_clip,
                height: world.height,
                width: world.width,
                m_steps: 200,
            },
            textenc: TextEncoderConfig {
                vocab_size: vocab.size(),
                d_model,
                n_heads: 4,
                q_slots,
                max_len: 16,
            },
            schedule: ScheduleConfig::default(),
            key_frames_per_clip: 4,
            stage2_window_clips: 3,
            lora_rank: 8,
            lora_alpha: 1.0,
            lora_only: false,
            stage0: StageConfig { iterations: 1600, lr: 2e-3, ..Default::default() },
            stage1: StageConfig { iterations: 120, lr: 2e-3, ..Default::default() },
            stage2: StageConfig { iterations: 1800, lr: 2e-3, ..Default::default() },
            stage3: StageConfig { iterations: 60, lr: 1e-3, ..Default::default() },
            world,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.decoder.validate()?;
        self.textenc.validate()?;
        let vocab = Vocabulary::new(self.world.palette_size);
        if self.model.vocab_size != vocab.size() || self.textenc.vocab_size != vocab.size() {
            return Err(Error::Config("vocab size does not match the world palette".into()));
        }
        if self.textenc.d_model != self.model.d_model
            || self.textenc.q_slots != self.model.q_slots
            || self.decoder.d_state != self.model.d_model
        {
            return Err(Error::Config("state shapes disagree across components".into()));
        }
        if self.decoder.frames != self.world.frames_per_clip
            || self.decoder.height != self.world.height
            || self.decoder.width != self.world.width
        {
            return Err(Error::Config("decoder clip shape does not match the world".into()));
        }
        if self.decoder.m_steps != self.schedule.steps {
            return Err(Error::Config("decoder time table does not match the schedule".into()));
        }
        if self.key_frames_per_clip == 0 || self.key_frames_per_clip > self.world.frames_per_clip {
            return Err(Error::Config("key_frames_per_clip out of range".into()));
        }
        if self.model.visual_base != vocab.visual_base()
            || self.model.frame_cells != self.world.height * self.world.width
            || self.model.run_frames < self.key_frames_per_clip
        {
            return Err(Error::Config("model visual-token layout does not match the world".into()));
        }
        Ok(())
    }
}

/// All trained components plus the stage counter.
pub struct WorldModel {
    pub cfg: PipelineConfig,
    pub vocab: Vocabulary,
    pub model: SeqModel,
    pub decoder: DecoderNet,
    pub textenc: TextEncoder,
    pub schedule: NoiseSchedule,
    /// Next stage expected to run (0..=4).
    pub stage: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub losses: Vec<f64>,
    pub holdout_loss: f64,
}

impl StageReport {
    /// Line-delimited training log for this stage.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("stage{}\titer\t{}\t{:.6}\n", self.stage, i, l));
        }
        out.push_str(&format!("stage{}\tholdout\t-\t{:.6}\n", self.stage, self.holdout_loss));
        out
    }
}

/// Previous-observation condition for clip `t`: the last frame of the
/// previous clip, the initial frame for the first clip, or nothing at a
/// scene break (the decoder must not peek across scenes).
pub fn o_prev_for(episode: &Episode, t: usize, palette: &[[f64; 3]]) -> Option<Mat> {
    if episode.scene_breaks[t] {
        return None;
    }
    if t == 0 {
        Some(frame_to_pixels(&episode.initial_frame, palette))
    } else {
        Some(frames_to_clip(&episode.clips[t - 1].frames, palette).last_frame())
    }
}

impl WorldModel {
    pub fn init(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new(cfg.world.palette_size);
        let mut rng = derive_rng(cfg.seed, "init.seqmodel");
        let model = SeqModel::new(cfg.model.clone(), &mut rng)?;
        let mut rng = derive_rng(cfg.seed, "init.decoder");
        let decoder = DecoderNet::new(cfg.decoder.clone(), &mut rng)?;
        let mut rng = derive_rng(cfg.seed, "init.textenc");
        let textenc = TextEncoder::new(cfg.textenc.clone(), &mut rng)?;
        let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
        Ok(Self { cfg, vocab, model, decoder, textenc, schedule, stage: 0 })
    }

    fn require_stage(&self, want: u8) -> Result<()> {
        if self.stage != want {
            return Err(Error::StageOrder(format!(
                "stage {want} requires the previous stages; next expected stage is {}",
                self.stage
            )));
        }
        Ok(())
    }

    fn palette(&self) -> Vec<[f64; 3]> {
        palette_colors(self.cfg.world.palette_size)
    }

    /// Split a dataset into train and holdout episodes (about 10% held out).
    pub fn split<'d>(&self, data: &'d Dataset) -> (&'d [Episode], &'d [Episode]) {
        let n = data.episodes.len();
        let hold = (n / 10).max(1).min(n.saturating_sub(1));
        let cut = n - hold;
        (&data.episodes[..cut], &data.episodes[cut..])
    }

    /// Key-frame observation tokens for every clip of an episode.
    fn episode_observations(&self, ep: &Episode) -> Result<Vec<Vec<u32>>> {
        ep.clips
            .iter()
            .map(|c| {
                let frames = sample_key_frames(c, self.cfg.key_frames_per_clip)?;
                let mut toks = Vec::new();
                for f in &frames {
                    toks.extend(self.vocab.tokenize_frame(f)?);
                }
                Ok(toks)
            })
            .collect()
    }

    pub fn episode_alignment_sequence(&self, ep: &Episode) -> Result<MixedSequence> {
        let init = self.vocab.tokenize_frame(&ep.initial_frame)?;
        let captions = ep
            .captions
            .iter()
            .map(|c| self.vocab.tokenize_text(c))
            .collect::<Result<Vec<_>>>()?;
        let obs = self.episode_observations(ep)?;
        build_alignment_sequence(&self.vocab, &init, &captions, &obs, self.cfg.model.q_slots)
    }

    pub fn episode_worldmodel_sequence(&self, ep: &Episode) -> Result<MixedSequence> {
        let init = self.vocab.tokenize_frame(&ep.initial_frame)?;
        let d0 = self.vocab.tokenize_text(&ep.initial_caption)?;
        let obs = self.episode_observations(ep)?;
        let triplets: Vec<TripletInput> = obs
            .into_iter()
            .enumerate()
            .map(|(t, o)| {
                Ok(TripletInput {
                    obs: o,
                    dynamics: self.vocab.tokenize_text(&ep.captions[t])?,
                    scene_break: ep.scene_breaks[t],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        build_worldmodel_sequence(&self.vocab, &init, &d0, &triplets, self.cfg.model.q_slots)
    }

    /// World-model sequence over `len` consecutive clips starting at clip
    /// `start`. The window's initial frame is the first frame of its first
    /// clip and its context caption is the caption preceding the window (the
    /// episode's initial caption when `start` is 0). Used for windowed
    /// generative training: shorter sequences cost quadratically less
    /// attention per step while covering the same clips per epoch.
    pub fn episode_worldmodel_window(
        &self,
        ep: &Episode,
        start: usize,
        len: usize,
    ) -> Result<MixedSequence> {
        if len == 0 || start + len > ep.clips.len() {
            return Err(Error::Argument("window exceeds the episode".into()));
        }
        let init = self.vocab.tokenize_frame(&ep.clips[start].frames[0])?;
        let d0 = if start == 0 {
            self.vocab.tokenize_text(&ep.initial_caption)?
        } else {
            self.vocab.tokenize_text(&ep.captions[start - 1])?
        };
        let triplets: Vec<TripletInput> = (start..start + len)
            .map(|t| {
                let frames = sample_key_frames(&ep.clips[t], self.cfg.key_frames_per_clip)?;
                let mut obs = Vec::new();
                for f in &frames {
                    obs.extend(self.vocab.tokenize_frame(f)?);
                }
                Ok(TripletInput {
                    obs,
                    dynamics: self.vocab.tokenize_text(&ep.captions[t])?,
                    scene_break: ep.scene_breaks[t],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        build_worldmodel_sequence(&self.vocab, &init, &d0, &triplets, self.cfg.model.q_slots)
    }

    /// Cross entropy of observation (and closing EOC) tokens under the
    /// next-token logits.
    fn observation_loss(
        &self,
        tape: &mut Tape,
        logits: crate::autodiff::Var,
        seq: &MixedSequence,
    ) -> Result<crate::autodiff::Var> {
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for span in &seq.triplets {
            for p in (span.obs_range.start - 1)..span.obs_range.end {
                positions.push(p);
                match seq.elements[p + 1] {
                    crate::seqmodel::Element::Token(id) => targets.push(id as usize),
                    _ => return Err(Error::State("observation span ends in a state query".into())),
                }
            }
        }
        if positions.is_empty() {
            return Err(Error::EmptyResult("no observation targets".into()));
        }
        let rows = tape.gather_rows(logits, &positions);
        Ok(tape.cross_entropy_rows(rows, &targets))
    }

    /// Stage 0: decoder + text encoder pretraining on ground-truth clips.
    pub fn stage0_pretrain(&mut self, data: &Dataset, cfg: &StageConfig) -> Result<StageReport> {
        self.require_stage(0)?;
        let frozen = self.model.params.digest();
        let (train, holdout) = self.split(data);
        let palette = self.palette();
        self.decoder.params.reset_optimizer();
        self.textenc.params.reset_optimizer();
        let mut rng = derive_rng(self.cfg.seed, "stage0");
        let mut losses = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let ep = &train[rng.random_range(0..train.len())];
            let t = rng.random_range(0..ep.clips.len());
            let x0 = frames_to_clip(&ep.clips[t].frames, &palette);
            let o_prev = o_prev_for(ep, t, &palette);
            let cap_ids = self.vocab.tokenize_text(&ep.captions[t])?;
            let mut tape = Tape::new();
            let cond = self.textenc.forward(&mut tape, &cap_ids)?;
            let loss = self.decoder.denoise_loss(
                &mut tape,
                &x0,
                StateCond::Node(cond),
                o_prev.as_ref(),
                &self.schedule,
                cfg.p_drop,
                &mut rng,
            )?;
            losses.push(tape.value(loss)[[0, 0]]);
            let grads = tape.backward(loss);
            self.decoder.params.adam_step(&grads, cfg.lr, &|_| true);
            self.textenc.params.adam_step(&grads, cfg.lr, &|_| true);
        }
        if self.model.params.digest() != frozen {
            return Err(Error::Integrity("stage 0 must not touch the sequence model".into()));
        }
        let holdout_loss = self.holdout_denoise(holdout, None)?;
        self.stage = 1;
        Ok(StageReport { stage: 0, losses, holdout_loss })
    }

    /// Mean denoising loss over held-out clips, with text-encoder conditions
    /// (`states = None`) or supplied per-episode state conditions.
    fn holdout_denoise(&self, eps: &[Episode], states: Option<&[Vec<Mat>]>) -> Result<f64> {
        let palette = self.palette();
        let mut rng = derive_rng(self.cfg.seed, "holdout.denoise");
        let mut acc = 0.0;
        let mut n = 0usize;
        for (i, ep) in eps.iter().enumerate() {
            for t in 0..ep.clips.len() {
                let x0 = frames_to_clip(&ep.clips[t].frames, &palette);
                let o_prev = o_prev_for(ep, t, &palette);
                let mut tape = Tape::new();
                let cond = match states {
                    Some(per_ep) => tape.leaf(per_ep[i][t].clone()),
                    None => {
                        let ids = self.vocab.tokenize_text(&ep.captions[t])?;
                        self.textenc.forward(&mut tape, &ids)?
                    }
                };
                let loss = self.decoder.denoise_loss(
                    &mut tape,
                    &x0,
                    StateCond::Node(cond),
                    o_prev.as_ref(),
                    &self.schedule,
                    0.0,
                    &mut rng,
                )?;
                acc += tape.value(loss)[[0, 0]];
                n += 1;
            }
        }
        Ok(acc / n as f64)
    }

    /// Alignment targets: frozen text encodings of every caption.
    fn alignment_targets(&self, eps: &[Episode]) -> Result<Vec<Vec<Mat>>> {
        eps.iter()
            .map(|ep| {
                ep.captions
                    .iter()
                    .map(|c| self.textenc.encode_text(&self.vocab, c))
                    .collect()
            })
            .collect()
    }

    fn alignment_loss_for(&self, ep: &Episode, targets: &[Mat]) -> Result<(Tape, crate::autodiff::Var)> {
        let seq = self.episode_alignment_sequence(ep)?;
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &seq, false)?;
        let mut parts = Vec::with_capacity(seq.triplets.len());
        for t in 0..seq.triplets.len() {
            let st = self.model.read_state(&mut tape, out.hidden, &seq, t)?;
            parts.push(tape.mse_const(st, &targets[t]));
        }
        let loss = tape.mean_scalars(&parts);
        Ok((tape, loss))
    }

    /// Stage 1: align latent states to text encodings (sequence model only).
    pub fn stage1_align(&mut self, data: &Dataset, cfg: &StageConfig) -> Result<StageReport> {
        self.require_stage(1)?;
        let frozen = (self.decoder.params.digest(), self.textenc.params.digest());
        let (train, holdout) = self.split(data);
        let train_targets = self.alignment_targets(train)?;
        let holdout_targets = self.alignment_targets(holdout)?;
        self.model.params.reset_optimizer();
        let mut rng = derive_rng(self.cfg.seed, "stage1");
        let mut losses = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let i = rng.random_range(0..train.len());
            let (tape, loss) = self.alignment_loss_for(&train[i], &train_targets[i])?;
            losses.push(tape.value(loss)[[0, 0]]);
            let grads = tape.backward(loss);
            self.model.params.adam_step(&grads, cfg.lr, &|_| true);
        }
        if (self.decoder.params.digest(), self.textenc.params.digest()) != frozen {
            return Err(Error::Integrity("stage 1 must only train the sequence model".into()));
        }
        let mut acc = 0.0;
        for (i, ep) in holdout.iter().enumerate() {
            let (tape, loss) = self.alignment_loss_for(ep, &holdout_targets[i])?;
            acc += tape.value(loss)[[0, 0]];
        }
        let holdout_loss = acc / holdout.len() as f64;
        self.stage = 2;
        Ok(StageReport { stage: 1, losses, holdout_loss })
    }

    /// Mean held-out alignment MSE between latent states and text encodings,
    /// computable at any point after stage 0 without mutating the model.
    pub fn alignment_holdout_mse(&self, data: &Dataset) -> Result<f64> {
        let (_, holdout) = self.split(data);
        let targets = self.alignment_targets(holdout)?;
        let mut acc = 0.0;
        for (i, ep) in holdout.iter().enumerate() {
            let (tape, loss) = self.alignment_loss_for(ep, &targets[i])?;
            acc += tape.value(loss)[[0, 0]];
        }
        Ok(acc / holdout.len() as f64)
    }

    /// Teacher-forced greedy next-dynamics-token accuracy over episodes:
    /// at every dynamics position the argmax logit (ties toward the lowest
    /// id) is compared with the scripted target token.
    pub fn dynamics_token_accuracy(&self, episodes: &[Episode]) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for ep in episodes {
            let seq = self.episode_worldmodel_sequence(ep)?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &seq, true)?;
            let logits = tape.value(out.logits.unwrap());
            for span in &seq.triplets {
                for (&pos, &target) in span.dyn_logit_positions.iter().zip(&span.dyn_targets) {
                    let row = logits.row(pos);
                    let mut best = 0usize;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    if best as u32 == target {
                        hits += 1;
                    }
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyResult("no dynamics targets".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    /// Stage-2 objective: `lambda_dyn * dynamics CE + observation CE`. The
    /// dynamics weight matters because observation positions outnumber
    /// dynamics positions ~24:1 and would otherwise dominate the gradient.
    fn generative_loss_for(&self, ep: &Episode, lambda_dyn: f64) -> Result<(Tape, crate::autodiff::Var)> {
        let seq = self.episode_worldmodel_sequence(ep)?;
        self.generative_loss_for_seq(&seq, lambda_dyn)
    }

    fn generative_loss_for_seq(
        &self,
        seq: &MixedSequence,
        lambda_dyn: f64,
    ) -> Result<(Tape, crate::autodiff::Var)> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, seq, true)?;
        let logits = out.logits.unwrap();
        let dyn_loss = self.model.dynamics_loss(&mut tape, logits, seq)?;
        let dyn_loss = tape.scale(dyn_loss, lambda_dyn);
        let obs_loss = self.observation_loss(&mut tape, logits, seq)?;
        let loss = tape.add(dyn_loss, obs_loss);
        Ok((tape, loss))
    }

    /// Stage 2: generative pretraining of the sequence model (next-token
    /// prediction of observations and dynamics).
    pub fn stage2_generative(&mut self, data: &Dataset, cfg: &StageConfig) -> Result<StageReport> {
        self.require_stage(2)?;
        let frozen = (self.decoder.params.digest(), self.textenc.params.digest());
        let (train, holdout) = self.split(data);
        self.model.params.reset_optimizer();
        let mut rng = derive_rng(self.cfg.seed, "stage2");
        let mut losses = Vec::with_capacity(cfg.iterations);
        let window = self.cfg.stage2_window_clips;
        for _ in 0..cfg.iterations {
            let ep = &train[rng.random_range(0..train.len())];
            let (tape, loss) = if window > 0 && window < ep.clips.len() {
                let start = rng.random_range(0..=ep.clips.len() - window);
                let mut seq = self.episode_worldmodel_window(ep, start, window)?;
                seq.pos_offset = rng.random_range(0..=self.cfg.model.max_seq_len - seq.len());
                self.generative_loss_for_seq(&seq, cfg.lambda_dyn)?
            } else {
                self.generative_loss_for(ep, cfg.lambda_dyn)?
            };
            losses.push(tape.value(loss)[[0, 0]]);
            let grads = tape.backward(loss);
            self.model.params.adam_step(&grads, cfg.lr, &|_| true);
        }
        if (self.decoder.params.digest(), self.textenc.params.digest()) != frozen {
            return Err(Error::Integrity("stage 2 must only train the sequence model".into()));
        }
        let mut acc = 0.0;
        for ep in holdout {
            let (tape, loss) = self.generative_loss_for(ep, cfg.lambda_dyn)?;
            acc += tape.value(loss)[[0, 0]];
        }
        let holdout_loss = acc / holdout.len() as f64;
        self.stage = 3;
        Ok(StageReport { stage: 2, losses, holdout_loss })
    }

    /// Stage 3: world-model training. Dynamics prediction plus decoding
    /// through the latent state; adapters are attached to the sequence
    /// model's attention and merged at the end of the stage.
    pub fn stage3_worldmodel(&mut self, data: &Dataset, cfg: &StageConfig) -> Result<StageReport> {
        self.require_stage(3)?;
        let frozen = self.textenc.params.digest();
        let (train, holdout) = self.split(data);
        let palette = self.palette();
        if self.cfg.lora_rank > 0 {
            let mut rng = derive_rng(self.cfg.seed, "stage3.lora");
            self.model.apply_lora(self.cfg.lora_rank, self.cfg.lora_alpha, &mut rng)?;
        }
        self.model.params.reset_optimizer();
        self.decoder.params.reset_optimizer();
        let lora_only = self.cfg.lora_only && self.cfg.lora_rank > 0;
        let mut rng = derive_rng(self.cfg.seed, "stage3");
        let mut losses = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let ep = &train[rng.random_range(0..train.len())];
            let t = rng.random_range(0..ep.clips.len());
            let seq = self.episode_worldmodel_sequence(ep)?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &seq, true)?;
            let logits = out.logits.unwrap();
            let dyn_loss = self.model.dynamics_loss(&mut tape, logits, &seq)?;
            let state = self.model.read_state(&mut tape, out.hidden, &seq, t)?;
            let x0 = frames_to_clip(&ep.clips[t].frames, &palette);
            let o_prev = o_prev_for(ep, t, &palette);
            let den_loss = self.decoder.denoise_loss(
                &mut tape,
                &x0,
                StateCond::Node(state),
                o_prev.as_ref(),
                &self.schedule,
                cfg.p_drop,
                &mut rng,
            )?;
            let dw = tape.scale(dyn_loss, cfg.lambda_dyn);
            let ew = tape.scale(den_loss, cfg.lambda_denoise);
            let loss = tape.add(dw, ew);
            losses.push(tape.value(loss)[[0, 0]]);
            let grads = tape.backward(loss);
            self.decoder.params.adam_step(&grads, cfg.lr, &|_| true);
            if lora_only {
                self.model.params.adam_step(&grads, cfg.lr, &|k| k.starts_with("lora."));
            } else {
                self.model.params.adam_step(&grads, cfg.lr, &|_| true);
            }
        }
        if self.textenc.params.digest() != frozen {
            return Err(Error::Integrity("stage 3 must not touch the text encoder".into()));
        }
        if self.model.lora.is_some() {
            self.model.merge_lora()?;
        }
        // holdout: denoise loss through the model's own states
        let mut states = Vec::with_capacity(holdout.len());
        for ep in holdout {
            let seq = self.episode_worldmodel_sequence(ep)?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &seq, false)?;
            let mut per_clip = Vec::with_capacity(seq.triplets.len());
            for t in 0..seq.triplets.len() {
                let st = self.model.read_state(&mut tape, out.hidden, &seq, t)?;
                per_clip.push(tape.value(st).clone());
            }
            states.push(per_clip);
        }
        let holdout_loss = self.holdout_denoise(holdout, Some(&states))?;
        self.stage = 4;
        Ok(StageReport { stage: 3, losses, holdout_loss })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreEntry {
    name: String,
    file: String,
    digest: String,
    schema: Vec<ParamSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    schema_version: u32,
    kind: String,
    stage: u8,
    pipeline: PipelineConfig,
    stores: Vec<StoreEntry>,
}

pub fn save_checkpoint(wm: &WorldModel, dir: &Path) -> Result<()> {
    if wm.model.lora.is_some() {
        return Err(Error::State("merge adapters before checkpointing".into()));
    }
    fs::create_dir_all(dir)?;
    let mut stores = Vec::new();
    for store in [&wm.model.params, &wm.decoder.params, &wm.textenc.params] {
        let file = format!("{}.bin", store.name);
        let bytes = store.to_bytes();
        fs::write(dir.join(&file), &bytes)?;
        stores.push(StoreEntry {
            name: store.name.clone(),
            file,
            digest: sha256_hex(&bytes),
            schema: store.schema(),
        });
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: "worldfilm-checkpoint".into(),
        stage: wm.stage,
        pipeline: wm.cfg.clone(),
        stores,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<WorldModel> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION
        || manifest.kind != "worldfilm-checkpoint"
    {
        return Err(Error::Corruption("unrecognized checkpoint manifest".into()));
    }
    let mut wm = WorldModel::init(manifest.pipeline)?;
    wm.stage = manifest.stage;
    for entry in &manifest.stores {
        let bytes = fs::read(dir.join(&entry.file))?;
        if sha256_hex(&bytes) != entry.digest {
            return Err(Error::Corruption(format!("digest mismatch in {}", entry.file)));
        }
        let store = ParamStore::from_bytes(&entry.name, &entry.schema, &bytes)?;
        match entry.name.as_str() {
            "seqmodel" => wm.model.params = store,
            "decoder" => wm.decoder.params = store,
            "textenc" => wm.textenc.params = store,
            other => return Err(Error::Corruption(format!("unknown parameter group {other}"))),
        }
    }
    Ok(wm)
}

/// Run the full pipeline on a dataset, returning the trained model and the
/// four stage reports.
pub fn run_full_pipeline(cfg: PipelineConfig, data: &Dataset) -> Result<(WorldModel, Vec<StageReport>)> {
    let mut wm = WorldModel::init(cfg)?;
    let reports = vec![
        wm.stage0_pretrain(data, &wm.cfg.stage0.clone())?,
        wm.stage1_align(data, &wm.cfg.stage1.clone())?,
        wm.stage2_generative(data, &wm.cfg.stage2.clone())?,
        wm.stage3_worldmodel(data, &wm.cfg.stage3.clone())?,
    ];
    Ok((wm, reports))
}

impl PipelineConfig {
    /// Tiny demonstration configuration: two 2-frame clips per episode and a
    /// 16-dimensional model, small enough to train in well under a minute.
    pub fn tiny_demo() -> Self {
        let mut cfg = PipelineConfig::desk_default();
        cfg.world.frames_per_clip = 2;
        cfg.world.clips_per_scene = 1;
        cfg.world.scenes_per_episode = 2;
        cfg.model.d_model = 16;
        cfg.model.n_layers = 1;
        cfg.model.n_heads = 2;
        cfg.model.q_slots = 4;
        cfg.model.max_seq_len = 512;
        cfg.decoder = DecoderConfig {
            d_dec: 16,
            n_blocks: 1,
            n_heads: 2,
            d_state: 16,
            frames: 2,
            height: 8,
            width: 8,
            m_steps: 16,
        };
        cfg.textenc.d_model = 16;
        cfg.textenc.n_heads = 2;
        cfg.textenc.q_slots = 4;
        cfg.schedule = ScheduleConfig { steps: 16, beta_1: 1e-4, beta_m: 0.02 };
        cfg.key_frames_per_clip = 1;
        cfg.lora_rank = 2;
        cfg.stage0.iterations = 80;
        cfg.stage1.iterations = 40;
        cfg.stage2.iterations = 60;
        cfg.stage3.iterations = 12;
        cfg
    }
}

#[cfg(test)]
pub(crate) fn micro_pipeline_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::tiny_demo();
    for st in [&mut cfg.stage0, &mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3] {
        st.iterations = 2;
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_data(cfg: &PipelineConfig) -> Dataset {
        Dataset::generate(&cfg.world, 6, 50).unwrap()
    }

    #[test]
    fn stage_order_is_enforced() {
        let cfg = micro_pipeline_config();
        let data = micro_data(&cfg);
        let mut wm = WorldModel::init(cfg).unwrap();
        let st = StageConfig { iterations: 0, ..Default::default() };
        match wm.stage1_align(&data, &st) {
            Err(Error::StageOrder(_)) => {}
            other => panic!("expected stage order error, got ok={}", other.is_ok()),
        }
        wm.stage0_pretrain(&data, &st).unwrap();
        assert!(matches!(wm.stage0_pretrain(&data, &st), Err(Error::StageOrder(_))));
        wm.stage1_align(&data, &st).unwrap();
        wm.stage2_generative(&data, &st).unwrap();
        wm.stage3_worldmodel(&data, &st).unwrap();
        assert_eq!(wm.stage, 4);
    }

    #[test]
    fn zero_iteration_stages_leave_parameters_unchanged() {
        let cfg = micro_pipeline_config();
        let data = micro_data(&cfg);
        let mut wm = WorldModel::init(cfg).unwrap();
        let digests = (
            wm.model.params.digest(),
            wm.decoder.params.digest(),
            wm.textenc.params.digest(),
        );
        let st = StageConfig { iterations: 0, ..Default::default() };
        wm.stage0_pretrain(&data, &st).unwrap();
        wm.stage1_align(&data, &st).unwrap();
        wm.stage2_generative(&data, &st).unwrap();
        wm.stage3_worldmodel(&data, &st).unwrap();
        assert_eq!(
            (wm.model.params.digest(), wm.decoder.params.digest(), wm.textenc.params.digest()),
            digests
        );
    }

    #[test]
    fn full_micro_pipeline_is_bitwise_deterministic() {
        let cfg = micro_pipeline_config();
        let data = micro_data(&cfg);
        let run = || {
            let (wm, reports) = run_full_pipeline(cfg.clone(), &data).unwrap();
            (
                wm.model.params.digest(),
                wm.decoder.params.digest(),
                wm.textenc.params.digest(),
                reports.iter().flat_map(|r| r.losses.clone()).collect::<Vec<_>>(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn stage0_loss_decreases_on_micro_decoder() {
        let mut cfg = micro_pipeline_config();
        cfg.stage0.iterations = 60;
        cfg.stage0.lr = 3e-3;
        let data = micro_data(&cfg);
        let mut wm = WorldModel::init(cfg.clone()).unwrap();
        let rep = wm.stage0_pretrain(&data, &cfg.stage0).unwrap();
        let head: f64 = rep.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = rep.losses[rep.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "no improvement: head {head} tail {tail}");
        assert!(rep.holdout_loss.is_finite());
    }

    #[test]
    fn o_prev_is_dropped_exactly_at_scene_breaks() {
        let cfg = micro_pipeline_config();
        let data = micro_data(&cfg);
        let palette = palette_colors(cfg.world.palette_size);
        let ep = &data.episodes[0];
        for t in 0..ep.clips.len() {
            let got = o_prev_for(ep, t, &palette);
            assert_eq!(got.is_none(), ep.scene_breaks[t], "clip {t}");
            if t > 0 && !ep.scene_breaks[t] {
                let want = frames_to_clip(&ep.clips[t - 1].frames, &palette).last_frame();
                assert_eq!(got.unwrap(), want);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = micro_pipeline_config();
        let data = micro_data(&cfg);
        let mut wm = WorldModel::init(cfg).unwrap();
        let st = StageConfig { iterations: 1, ..Default::default() };
        wm.stage0_pretrain(&data, &st).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("ck1");
        let d2 = dir.path().join("ck2");
        save_checkpoint(&wm, &d1).unwrap();
        let back = load_checkpoint(&d1).unwrap();
        assert_eq!(back.stage, wm.stage);
        assert_eq!(back.model.params.digest(), wm.model.params.digest());
        save_checkpoint(&back, &d2).unwrap();
        for f in ["manifest.json", "seqmodel.bin", "decoder.bin", "textenc.bin"] {
            assert_eq!(
                fs::read(d1.join(f)).unwrap(),
                fs::read(d2.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let cfg = micro_pipeline_config();
        let wm = WorldModel::init(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&wm, dir.path()).unwrap();
        let target = dir.path().join("decoder.bin");
        let mut bytes = fs::read(&target).unwrap();
        bytes[8] ^= 0xff;
        fs::write(&target, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn loaded_checkpoint_resumes_at_the_right_stage() {
        let cfg = micro_pipeline_config();
        let data = micro_data(&cfg);
        let mut wm = WorldModel::init(cfg).unwrap();
        let st = StageConfig { iterations: 1, ..Default::default() };
        wm.stage0_pretrain(&data, &st).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&wm, dir.path()).unwrap();
        let mut back = load_checkpoint(dir.path()).unwrap();
        assert!(matches!(back.stage0_pretrain(&data, &st), Err(Error::StageOrder(_))));
        back.stage1_align(&data, &st).unwrap();
    }
}
