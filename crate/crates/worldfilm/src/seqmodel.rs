//! Causal mixed-modality sequence model. The sequence interleaves visual
//! tokens, caption/dynamics tokens and blocks of learned state queries; the
//! final-layer output at the query positions is the latent world state.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{insert_layernorm, insert_linear, randn_mat, zeros_mat, ParamStore};
use crate::tokenize::{Special, Vocabulary};
use crate::util::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of learned state query rows per state block.
    pub q_slots: usize,
    pub max_seq_len: usize,
    /// First vocabulary id of the visual-token block.
    pub visual_base: u32,
    /// Cells per frame. Visual tokens additionally receive a frame-local cell
    /// embedding (run position modulo `frame_cells`), giving every frame's
    /// cells a stable identity independent of where the frame sits in the
    /// sequence.
    pub frame_cells: usize,
    /// Maximum frames in one contiguous visual run (= key frames per
    /// observation). Each visual token also receives a frame-index embedding
    /// (run position / `frame_cells`), so the model can tell which frame of
    /// an observation a cell belongs to.
    pub run_frames: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        if self.n_layers == 0 || self.q_slots == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.frame_cells == 0 || self.run_frames == 0 {
            return Err(Error::Config("frame_cells and run_frames must be positive".into()));
        }
        if self.visual_base as usize >= self.vocab_size {
            return Err(Error::Config("visual_base must lie inside the vocabulary".into()));
        }
        Ok(())
    }
}

/// One position of a mixed sequence: a vocabulary token or the `q`-th learned
/// state query row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    Token(u32),
    StateQuery(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    InitImage,
    Caption,
    StateQuery,
    Observation,
    Dynamics,
    Special,
}

/// Per-triplet bookkeeping: where its state block and observation tokens sit,
/// and which logit positions predict its dynamics tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSpan {
    pub state_range: Range<usize>,
    pub obs_range: Range<usize>,
    /// Logit rows at these positions predict `dyn_targets` (teacher forcing:
    /// BOD predicts the first word, the last word predicts EOD).
    pub dyn_logit_positions: Vec<usize>,
    pub dyn_targets: Vec<u32>,
    pub scene_break: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedSequence {
    pub elements: Vec<Element>,
    pub roles: Vec<Role>,
    pub triplets: Vec<TripletSpan>,
    /// Positional-embedding offset: position i uses row `pos_offset + i`.
    /// Randomizing the offset during windowed training spreads gradient over
    /// every positional row, so short training windows still generalize to
    /// full-length sequences.
    pub pos_offset: usize,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    fn push(&mut self, e: Element, r: Role) -> usize {
        self.elements.push(e);
        self.roles.push(r);
        self.elements.len() - 1
    }

    fn push_tokens(&mut self, ids: &[u32], r: Role) -> Range<usize> {
        let start = self.elements.len();
        for &id in ids {
            self.push(Element::Token(id), r);
        }
        start..self.elements.len()
    }

    fn push_state_block(&mut self, q_slots: usize) -> Range<usize> {
        let start = self.elements.len();
        for q in 0..q_slots {
            self.push(Element::StateQuery(q), Role::StateQuery);
        }
        start..self.elements.len()
    }
}

/// Content of one step: the observation's visual tokens (key frames,
/// concatenated) and the dynamics caption's word ids.
#[derive(Debug, Clone)]
pub struct TripletInput {
    pub obs: Vec<u32>,
    pub dynamics: Vec<u32>,
    pub scene_break: bool,
}

/// Alignment-stage layout:
/// `BOS IMG <init frame> [ <caption_t> <STATE x Q> BOC <obs_t> EOC ]* EOS`.
/// The state block for step t follows caption t, so its output sees captions
/// up to t and observations up to t-1.
pub fn build_alignment_sequence(
    vocab: &Vocabulary,
    init_frame: &[u32],
    captions: &[Vec<u32>],
    observations: &[Vec<u32>],
    q_slots: usize,
) -> Result<MixedSequence> {
    if captions.len() != observations.len() || captions.is_empty() {
        return Err(Error::Argument("need one caption per observation".into()));
    }
    let mut seq = MixedSequence::default();
    seq.push(Element::Token(vocab.special(Special::Bos)), Role::Special);
    seq.push(Element::Token(vocab.special(Special::Img)), Role::Special);
    seq.push_tokens(init_frame, Role::InitImage);
    for (cap, obs) in captions.iter().zip(observations) {
        seq.push_tokens(cap, Role::Caption);
        let state_range = seq.push_state_block(q_slots);
        seq.push(Element::Token(vocab.special(Special::Boc)), Role::Special);
        let obs_range = seq.push_tokens(obs, Role::Observation);
        seq.push(Element::Token(vocab.special(Special::Eoc)), Role::Special);
        seq.triplets.push(TripletSpan {
            state_range,
            obs_range,
            dyn_logit_positions: vec![],
            dyn_targets: vec![],
            scene_break: false,
        });
    }
    seq.push(Element::Token(vocab.special(Special::Eos)), Role::Special);
    Ok(seq)
}

/// World-model layout:
/// `BOS IMG <init frame> <d_0> [ (NULL?) <STATE x Q> BOC <obs_t> EOC BOD <d_t> EOD ]* EOS`.
/// A NULL token precedes the state block of scene-break triplets. The state
/// block for step t sees d_{t-1}, so its output realizes s_t = g(s_{t-1}, d_{t-1}).
pub fn build_worldmodel_sequence(
    vocab: &Vocabulary,
    init_frame: &[u32],
    init_dynamics: &[u32],
    triplets: &[TripletInput],
    q_slots: usize,
) -> Result<MixedSequence> {
    if triplets.is_empty() {
        return Err(Error::Argument("need at least one triplet".into()));
    }
    let mut seq = MixedSequence::default();
    seq.push(Element::Token(vocab.special(Special::Bos)), Role::Special);
    seq.push(Element::Token(vocab.special(Special::Img)), Role::Special);
    seq.push_tokens(init_frame, Role::InitImage);
    seq.push_tokens(init_dynamics, Role::Caption);
    for t in triplets {
        if t.scene_break {
            seq.push(Element::Token(vocab.special(Special::NullCond)), Role::Special);
        }
        let state_range = seq.push_state_block(q_slots);
        seq.push(Element::Token(vocab.special(Special::Boc)), Role::Special);
        let obs_range = seq.push_tokens(&t.obs, Role::Observation);
        seq.push(Element::Token(vocab.special(Special::Eoc)), Role::Special);
        let bod = seq.push(Element::Token(vocab.special(Special::Bod)), Role::Special);
        let words = seq.push_tokens(&t.dynamics, Role::Dynamics);
        seq.push(Element::Token(vocab.special(Special::Eod)), Role::Special);
        let mut dyn_logit_positions = vec![bod];
        dyn_logit_positions.extend(words.start..words.end);
        let mut dyn_targets = t.dynamics.clone();
        dyn_targets.push(vocab.special(Special::Eod));
        seq.triplets.push(TripletSpan {
            state_range,
            obs_range,
            dyn_logit_positions,
            dyn_targets,
            scene_break: t.scene_break,
        });
    }
    seq.push(Element::Token(vocab.special(Special::Eos)), Role::Special);
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

pub struct ForwardOut {
    /// Final-layernorm hidden states, one row per position.
    pub hidden: Var,
    pub logits: Option<Var>,
}

pub struct SeqModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub lora: Option<LoraSpec>,
}

impl SeqModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut p = ParamStore::new("seqmodel");
        p.insert("embed", randn_mat(rng, cfg.vocab_size, d, 0.02));
        p.insert("query_emb", randn_mat(rng, cfg.q_slots, d, 0.02));
        p.insert("pos_emb", randn_mat(rng, cfg.max_seq_len, d, 0.02));
        p.insert("cell_emb", randn_mat(rng, cfg.frame_cells, d, 0.02));
        p.insert("frame_emb", randn_mat(rng, cfg.run_frames, d, 0.02));
        for l in 0..cfg.n_layers {
            insert_layernorm(&mut p, &format!("l{l}.ln1"), d);
            insert_linear(&mut p, rng, &format!("l{l}.sa.wq"), d, d);
            insert_linear(&mut p, rng, &format!("l{l}.sa.wk"), d, d);
            insert_linear(&mut p, rng, &format!("l{l}.sa.wv"), d, d);
            insert_linear(&mut p, rng, &format!("l{l}.sa.wo"), d, d);
            insert_layernorm(&mut p, &format!("l{l}.ln2"), d);
            insert_linear(&mut p, rng, &format!("l{l}.mlp.w1"), d, 4 * d);
            insert_linear(&mut p, rng, &format!("l{l}.mlp.w2"), 4 * d, d);
        }
        insert_layernorm(&mut p, "lnf", d);
        insert_linear(&mut p, rng, "lm_head", d, cfg.vocab_size);
        Ok(Self { cfg, params: p, lora: None })
    }

    /// Attention projections that receive low-rank adapters.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.cfg.n_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                out.push(format!("l{l}.sa.{name}"));
            }
        }
        out
    }

    /// Attach zero-initialized low-rank adapters. The model's function is
    /// unchanged until the adapters are trained.
    pub fn apply_lora(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::State("adapters are already applied".into()));
        }
        if rank == 0 {
            return Err(Error::Argument("adapter rank must be positive".into()));
        }
        for target in self.lora_targets() {
            let w = self.params.get(&format!("{target}.w"));
            let (d_in, d_out) = w.dim();
            let std = 1.0 / (d_in as f64).sqrt();
            self.params.insert(&format!("lora.{target}.a"), zeros_mat(d_out, rank));
            self.params.insert(&format!("lora.{target}.b"), randn_mat(rng, rank, d_in, std));
        }
        self.lora = Some(LoraSpec { rank, alpha });
        Ok(())
    }

    /// Fold adapters into the base weights and remove them:
    /// `W += alpha * (A B)^T`.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Some(spec) = self.lora else {
            return Err(Error::State("no adapters to merge".into()));
        };
        for target in self.lora_targets() {
            let a = self.params.get(&format!("lora.{target}.a")).clone();
            let b = self.params.get(&format!("lora.{target}.b")).clone();
            let delta = a.dot(&b).t().to_owned() * spec.alpha;
            *self.params.get_mut(&format!("{target}.w")) += &delta;
        }
        self.params.remove_prefix("lora.");
        self.lora = None;
        Ok(())
    }

    /// Linear layer with the optional low-rank bypass.
    fn lin(&self, tape: &mut Tape, prefix: &str, x: Var) -> Var {
        let w = self.params.var(tape, &format!("{prefix}.w"));
        let b = self.params.var(tape, &format!("{prefix}.b"));
        let y = tape.matmul(x, w);
        let mut y = tape.add_row(y, b);
        if let Some(spec) = self.lora {
            if self.params.try_get(&format!("lora.{prefix}.a")).is_some() {
                let a = self.params.var(tape, &format!("lora.{prefix}.a"));
                let bm = self.params.var(tape, &format!("lora.{prefix}.b"));
                let bt = tape.transpose(bm);
                let at = tape.transpose(a);
                let mid = tape.matmul(x, bt);
                let low = tape.matmul(mid, at);
                let low = tape.scale(low, spec.alpha);
                y = tape.add(y, low);
            }
        }
        y
    }

    fn ln(&self, tape: &mut Tape, prefix: &str, x: Var) -> Var {
        let g = self.params.var(tape, &format!("{prefix}.g"));
        let b = self.params.var(tape, &format!("{prefix}.b"));
        tape.layernorm(x, g, b)
    }

    /// Full causal forward pass on the tape.
    pub fn forward(&self, tape: &mut Tape, seq: &MixedSequence, need_logits: bool) -> Result<ForwardOut> {
        if seq.is_empty() {
            return Err(Error::Argument("empty sequence".into()));
        }
        if seq.pos_offset + seq.len() > self.cfg.max_seq_len {
            return Err(Error::SequenceLength {
                got: seq.pos_offset + seq.len(),
                max: self.cfg.max_seq_len,
            });
        }
        let embed = self.params.var(tape, "embed");
        let query = self.params.var(tape, "query_emb");
        let mut sources = Vec::with_capacity(seq.len());
        for e in &seq.elements {
            match *e {
                Element::Token(id) => {
                    if id as usize >= self.cfg.vocab_size {
                        return Err(Error::Vocabulary(format!("token id {id} out of range")));
                    }
                    sources.push((embed, id as usize));
                }
                Element::StateQuery(q) => {
                    if q >= self.cfg.q_slots {
                        return Err(Error::Argument(format!("state query row {q} out of range")));
                    }
                    sources.push((query, q));
                }
            }
        }
        let mut h = tape.assemble_rows(&sources);
        let pos = self.params.var(tape, "pos_emb");
        let pe = tape.gather_rows(
            pos,
            &(seq.pos_offset..seq.pos_offset + seq.len()).collect::<Vec<_>>(),
        );
        h = tape.add(h, pe);

        // Frame-local identity for visual tokens: the c-th visual token of a
        // contiguous visual run gets cell embedding c mod frame_cells plus
        // frame embedding c / frame_cells; non-visual positions get zero rows.
        let cell = self.params.var(tape, "cell_emb");
        let frame = self.params.var(tape, "frame_emb");
        let zero = tape.leaf(Mat::zeros((1, self.cfg.d_model)));
        let mut cell_sources = Vec::with_capacity(seq.len());
        let mut frame_sources = Vec::with_capacity(seq.len());
        let mut run = 0usize;
        for e in &seq.elements {
            match *e {
                Element::Token(id) if id >= self.cfg.visual_base => {
                    cell_sources.push((cell, run % self.cfg.frame_cells));
                    frame_sources.push((frame, (run / self.cfg.frame_cells) % self.cfg.run_frames));
                    run += 1;
                }
                _ => {
                    run = 0;
                    cell_sources.push((zero, 0));
                    frame_sources.push((zero, 0));
                }
            }
        }
        let ce = tape.assemble_rows(&cell_sources);
        h = tape.add(h, ce);
        let fe = tape.assemble_rows(&frame_sources);
        h = tape.add(h, fe);

        let nh = self.cfg.n_heads;
        let dh = self.cfg.d_model / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.cfg.n_layers {
            let pre = self.ln(tape, &format!("l{l}.ln1"), h);
            let q = self.lin(tape, &format!("l{l}.sa.wq"), pre);
            let k = self.lin(tape, &format!("l{l}.sa.wk"), pre);
            let v = self.lin(tape, &format!("l{l}.sa.wv"), pre);
            let mut ctxs = Vec::with_capacity(nh);
            for hd in 0..nh {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let sc = tape.matmul(qh, kt);
                let sc = tape.scale(sc, scale);
                let pr = tape.softmax(sc, true);
                ctxs.push(tape.matmul(pr, vh));
            }
            let ctx = tape.concat_cols(&ctxs);
            let ctx = self.lin(tape, &format!("l{l}.sa.wo"), ctx);
            h = tape.add(h, ctx);

            let pre = self.ln(tape, &format!("l{l}.ln2"), h);
            let mid = self.lin(tape, &format!("l{l}.mlp.w1"), pre);
            let mid = tape.silu(mid);
            let mid = self.lin(tape, &format!("l{l}.mlp.w2"), mid);
            h = tape.add(h, mid);
        }
        let hidden = self.ln(tape, "lnf", h);
        let logits = if need_logits { Some(self.lin(tape, "lm_head", hidden)) } else { None };
        Ok(ForwardOut { hidden, logits })
    }

    /// The latent state after step `t`: final hidden rows at the t-th state
    /// block (`Q x d_model`).
    pub fn read_state(&self, tape: &mut Tape, hidden: Var, seq: &MixedSequence, t: usize) -> Result<Var> {
        let span = seq
            .triplets
            .get(t)
            .ok_or_else(|| Error::Index(format!("no triplet {t} in sequence")))?;
        let idx: Vec<usize> = span.state_range.clone().collect();
        Ok(tape.gather_rows(hidden, &idx))
    }

    /// Mean cross entropy of the dynamics predictions over all triplets.
    pub fn dynamics_loss(&self, tape: &mut Tape, logits: Var, seq: &MixedSequence) -> Result<Var> {
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for span in &seq.triplets {
            positions.extend(span.dyn_logit_positions.iter().copied());
            targets.extend(span.dyn_targets.iter().map(|&t| t as usize));
        }
        if positions.is_empty() {
            return Err(Error::EmptyResult("sequence has no dynamics targets".into()));
        }
        let rows = tape.gather_rows(logits, &positions);
        Ok(tape.cross_entropy_rows(rows, &targets))
    }
}

/// Incremental (KV-cached) inference over the same weights, plain values only.
/// Appending elements returns their final-layernorm hidden rows, which for a
/// state block are exactly the latent state.
pub struct InferSession<'a> {
    model: &'a SeqModel,
    keys: Vec<Mat>,
    vals: Vec<Mat>,
    len: usize,
    /// Length of the current run of visual tokens, for the cell embedding.
    visual_run: usize,
}

fn ln_rows(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    let (n, d) = x.dim();
    let mut out = Mat::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mu = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out[[i, j]] = (row[j] - mu) * rs * g[[0, j]] + b[[0, j]];
        }
    }
    out
}

impl<'a> InferSession<'a> {
    pub fn new(model: &'a SeqModel) -> Self {
        let d = model.cfg.d_model;
        Self {
            model,
            keys: vec![Mat::zeros((0, d)); model.cfg.n_layers],
            vals: vec![Mat::zeros((0, d)); model.cfg.n_layers],
            len: 0,
            visual_run: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn lin(&self, prefix: &str, x: &Mat) -> Mat {
        let p = &self.model.params;
        let w = p.get(&format!("{prefix}.w"));
        let b = p.get(&format!("{prefix}.b"));
        let mut y = x.dot(w) + &b.row(0);
        if let Some(spec) = self.model.lora {
            if let Some(a) = p.try_get(&format!("lora.{prefix}.a")) {
                let bm = p.get(&format!("lora.{prefix}.b"));
                y = y + x.dot(&bm.t()).dot(&a.t()) * spec.alpha;
            }
        }
        y
    }

    /// Append elements and return their final hidden rows.
    pub fn append(&mut self, elems: &[Element]) -> Result<Mat> {
        if elems.is_empty() {
            return Err(Error::Argument("nothing to append".into()));
        }
        let cfg = &self.model.cfg;
        if self.len + elems.len() > cfg.max_seq_len {
            return Err(Error::SequenceLength { got: self.len + elems.len(), max: cfg.max_seq_len });
        }
        let p = &self.model.params;
        let d = cfg.d_model;
        let embed = p.get("embed");
        let query = p.get("query_emb");
        let pos = p.get("pos_emb");
        let cell = p.get("cell_emb");
        let frame = p.get("frame_emb");
        let mut h = Mat::zeros((elems.len(), d));
        for (i, e) in elems.iter().enumerate() {
            let src = match *e {
                Element::Token(id) => {
                    if id as usize >= cfg.vocab_size {
                        return Err(Error::Vocabulary(format!("token id {id} out of range")));
                    }
                    embed.row(id as usize)
                }
                Element::StateQuery(q) => {
                    if q >= cfg.q_slots {
                        return Err(Error::Argument(format!("state query row {q} out of range")));
                    }
                    query.row(q)
                }
            };
            let pe = pos.row(self.len + i);
            for j in 0..d {
                h[[i, j]] = src[j] + pe[j];
            }
            // Frame-local identity, same rule as the tape forward.
            match *e {
                Element::Token(id) if id >= cfg.visual_base => {
                    let ce = cell.row(self.visual_run % cfg.frame_cells);
                    let fe = frame.row((self.visual_run / cfg.frame_cells) % cfg.run_frames);
                    for j in 0..d {
                        h[[i, j]] += ce[j] + fe[j];
                    }
                    self.visual_run += 1;
                }
                _ => self.visual_run = 0,
            }
        }

        let nh = cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let offset = self.len;
        for l in 0..cfg.n_layers {
            let pre = ln_rows(&h, p.get(&format!("l{l}.ln1.g")), p.get(&format!("l{l}.ln1.b")));
            let q = self.lin(&format!("l{l}.sa.wq"), &pre);
            let k_new = self.lin(&format!("l{l}.sa.wk"), &pre);
            let v_new = self.lin(&format!("l{l}.sa.wv"), &pre);
            let k_all = ndarray::concatenate(ndarray::Axis(0), &[self.keys[l].view(), k_new.view()])
                .expect("cache width");
            let v_all = ndarray::concatenate(ndarray::Axis(0), &[self.vals[l].view(), v_new.view()])
                .expect("cache width");
            let total = k_all.nrows();
            let mut ctx = Mat::zeros((elems.len(), d));
            for hd in 0..nh {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]);
                let kh = k_all.slice(ndarray::s![.., cols.clone()]);
                let vh = v_all.slice(ndarray::s![.., cols.clone()]);
                let mut sc = qh.dot(&kh.t()) * scale;
                for i in 0..elems.len() {
                    let hi = (offset + i + 1).min(total);
                    let row = sc.row(i);
                    let mx = row.iter().take(hi).cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for jj in 0..hi {
                        let e = (sc[[i, jj]] - mx).exp();
                        sc[[i, jj]] = e;
                        sum += e;
                    }
                    for jj in 0..hi {
                        sc[[i, jj]] /= sum;
                    }
                    for jj in hi..total {
                        sc[[i, jj]] = 0.0;
                    }
                }
                let ch = sc.dot(&vh);
                ctx.slice_mut(ndarray::s![.., cols]).assign(&ch);
            }
            let ctx = self.lin(&format!("l{l}.sa.wo"), &ctx);
            h = &h + &ctx;
            let pre = ln_rows(&h, p.get(&format!("l{l}.ln2.g")), p.get(&format!("l{l}.ln2.b")));
            let mid = self.lin(&format!("l{l}.mlp.w1"), &pre);
            let mid = mid.mapv(|x| x / (1.0 + (-x).exp()));
            let mid = self.lin(&format!("l{l}.mlp.w2"), &mid);
            h = &h + &mid;
            self.keys[l] = k_all;
            self.vals[l] = v_all;
        }
        self.len += elems.len();
        Ok(ln_rows(&h, p.get("lnf.g"), p.get("lnf.b")))
    }

    /// Next-token logits for already-computed hidden rows.
    pub fn logits_of(&self, hidden: &Mat) -> Mat {
        self.lin("lm_head", hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDynamics {
    /// Sampled word ids (EOD excluded).
    pub tokens: Vec<u32>,
    /// True when the word budget ran out before EOD was produced.
    pub truncated: bool,
}

/// Sample a dynamics caption after a BOD token whose hidden row is
/// `bod_hidden`. Only text tokens and EOD are eligible. `temperature = 0`
/// means greedy (ties break toward the lowest id). The session is advanced
/// past the closing EOD either way.
pub fn sample_dynamics(
    session: &mut InferSession,
    bod_hidden: &Mat,
    vocab: &Vocabulary,
    temperature: f64,
    seed: u64,
    max_words: usize,
) -> Result<SampledDynamics> {
    if temperature < 0.0 {
        return Err(Error::Argument("temperature must be non-negative".into()));
    }
    let eod = vocab.special(Special::Eod);
    let mut allowed: Vec<u32> = vocab.text_range().collect();
    allowed.push(eod);
    let mut rng = derive_rng(seed, "dynamics.sample");
    let mut hidden = bod_hidden.row(bod_hidden.nrows() - 1).insert_axis(ndarray::Axis(0)).to_owned();
    let mut tokens = Vec::new();
    loop {
        let logits = session.logits_of(&hidden);
        let pick = pick_token(&logits, &allowed, temperature, &mut rng);
        if pick == eod {
            session.append(&[Element::Token(eod)])?;
            return Ok(SampledDynamics { tokens, truncated: false });
        }
        tokens.push(pick);
        hidden = session.append(&[Element::Token(pick)])?;
        if tokens.len() >= max_words {
            session.append(&[Element::Token(eod)])?;
            return Ok(SampledDynamics { tokens, truncated: true });
        }
    }
}

fn pick_token(logits: &Mat, allowed: &[u32], temperature: f64, rng: &mut ChaCha12Rng) -> u32 {
    let row = logits.row(0);
    if temperature == 0.0 {
        let mut best = allowed[0];
        let mut best_v = f64::NEG_INFINITY;
        for &id in allowed {
            let v = row[id as usize];
            if v > best_v {
                best_v = v;
                best = id;
            }
        }
        return best;
    }
    let mx = allowed.iter().map(|&id| row[id as usize]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> =
        allowed.iter().map(|&id| ((row[id as usize] - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return allowed[i];
        }
    }
    *allowed.last().unwrap()
}
