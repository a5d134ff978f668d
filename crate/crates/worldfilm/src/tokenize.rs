//! Deterministic text and visual tokenizers over disjoint id ranges.
//!
//! Text ids cover the closed caption grammar; visual ids are pixel-level
//! palette codes, one id per palette entry, so frame tokenization is lossless.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{
    Caption, Frame, MOTION_VERBS, SCENE_DESCRIPTORS, SCENE_WORDS, SHAPE_KINDS,
};

/// Special token ids, fixed at the start of the id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Bos = 0,
    Eos = 1,
    /// begin-clip
    Boc = 2,
    Eoc = 3,
    /// begin-dynamics
    Bod = 4,
    Eod = 5,
    Img = 6,
    State = 7,
    NullCond = 8,
}

pub const NUM_SPECIALS: u32 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    palette_size: usize,
    words: Vec<String>,
    #[serde(skip)]
    word_ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn new(palette_size: usize) -> Self {
        let mut words: Vec<String> = Vec::new();
        for c in 1..palette_size {
            words.push(crate::synthworld::color_word(c).to_string());
        }
        for w in SHAPE_KINDS.iter().chain(MOTION_VERBS.iter()) {
            words.push(w.to_string());
        }
        for w in SCENE_WORDS.iter().chain(SCENE_DESCRIPTORS.iter()) {
            words.push(w.to_string());
        }
        let mut v = Self { palette_size, words, word_ids: BTreeMap::new() };
        v.rebuild_index();
        v
    }

    /// Rebuild the word -> id map (needed after deserialization).
    pub fn rebuild_index(&mut self) {
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIALS + i as u32))
            .collect();
        assert_eq!(self.word_ids.len(), self.words.len(), "duplicate grammar word");
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS as usize + self.words.len() + self.palette_size
    }

    pub fn special(&self, s: Special) -> u32 {
        s as u32
    }

    pub fn text_range(&self) -> Range<u32> {
        NUM_SPECIALS..NUM_SPECIALS + self.words.len() as u32
    }

    pub fn visual_range(&self) -> Range<u32> {
        let base = NUM_SPECIALS + self.words.len() as u32;
        base..base + self.palette_size as u32
    }

    pub fn visual_base(&self) -> u32 {
        self.visual_range().start
    }

    pub fn palette_size(&self) -> usize {
        self.palette_size
    }

    pub fn word_id(&self, word: &str) -> Result<u32> {
        self.word_ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown word: {word}")))
    }

    pub fn word_of(&self, id: u32) -> Result<&str> {
        if !self.text_range().contains(&id) {
            return Err(Error::Vocabulary(format!("id {id} is not a text token")));
        }
        Ok(&self.words[(id - NUM_SPECIALS) as usize])
    }

    pub fn tokenize_text(&self, caption: &Caption) -> Result<Vec<u32>> {
        if caption.words.is_empty() {
            return Err(Error::Argument("empty caption".into()));
        }
        caption.words.iter().map(|w| self.word_id(w)).collect()
    }

    pub fn detokenize_text(&self, ids: &[u32]) -> Result<Caption> {
        let words = ids
            .iter()
            .map(|&id| self.word_of(id).map(|w| w.to_string()))
            .collect::<Result<Vec<_>>>()?;
        Caption::new(words)
    }

    /// Row-major pixel codes: id = visual_base + palette index.
    pub fn tokenize_frame(&self, frame: &Frame) -> Result<Vec<u32>> {
        let base = self.visual_base();
        frame
            .grid
            .iter()
            .map(|&p| {
                if (p as usize) < self.palette_size {
                    Ok(base + p as u32)
                } else {
                    Err(Error::Vocabulary(format!("palette index {p} out of range")))
                }
            })
            .collect()
    }

    pub fn detokenize_frame(&self, ids: &[u32], height: usize, width: usize) -> Result<Frame> {
        if ids.len() != height * width {
            return Err(Error::Decode(format!(
                "expected {} visual tokens, got {}",
                height * width,
                ids.len()
            )));
        }
        let range = self.visual_range();
        let mut data = Vec::with_capacity(ids.len());
        for &id in ids {
            if !range.contains(&id) {
                return Err(Error::Decode(format!("id {id} outside visual range {range:?}")));
            }
            data.push((id - range.start) as u8);
        }
        Ok(Frame {
            grid: ndarray::Array2::from_shape_vec((height, width), data)
                .map_err(|e| Error::Decode(e.to_string()))?,
        })
    }

    pub fn is_text(&self, id: u32) -> bool {
        self.text_range().contains(&id)
    }

    pub fn is_visual(&self, id: u32) -> bool {
        self.visual_range().contains(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{simulate_episode, WorldConfig};
    use crate::util::derive_rng;
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(8)
    }

    #[test]
    fn ranges_are_disjoint_and_cover_size() {
        let v = vocab();
        assert_eq!(v.text_range().start, NUM_SPECIALS);
        assert_eq!(v.text_range().end, v.visual_range().start);
        assert_eq!(v.visual_range().end as usize, v.size());
    }

    #[test]
    fn text_round_trip() {
        let v = vocab();
        let c = Caption::parse("red square moves_right").unwrap();
        let ids = v.tokenize_text(&c).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize_text(&ids).unwrap(), c);
    }

    #[test]
    fn empty_caption_rejected() {
        let v = vocab();
        let c = Caption { words: vec![] };
        assert!(v.tokenize_text(&c).is_err());
    }

    #[test]
    fn frame_token_count_and_background() {
        let v = vocab();
        let f = Frame { grid: ndarray::Array2::zeros((8, 8)) };
        let ids = v.tokenize_frame(&f).unwrap();
        assert_eq!(ids.len(), 64);
        assert!(ids.iter().all(|&id| id == v.visual_base()));
        let v16 = Vocabulary::new(8);
        let f16 = Frame { grid: ndarray::Array2::zeros((16, 16)) };
        assert_eq!(v16.tokenize_frame(&f16).unwrap().len(), 256);
    }

    #[test]
    fn frame_round_trip_random() {
        let v = vocab();
        let mut rng = derive_rng(11, "tok-frames");
        for _ in 0..1000 {
            let grid =
                ndarray::Array2::from_shape_fn((8, 8), |_| rng.random_range(0..8u8));
            let f = Frame { grid };
            let ids = v.tokenize_frame(&f).unwrap();
            assert_eq!(v.detokenize_frame(&ids, 8, 8).unwrap(), f);
        }
    }

    #[test]
    fn grammar_captions_round_trip() {
        let v = vocab();
        let cfg = WorldConfig::default();
        let mut count = 0;
        for seed in 0..200u64 {
            let ep = simulate_episode(&cfg, seed).unwrap();
            for cap in ep.captions.iter().chain(std::iter::once(&ep.initial_caption)) {
                let ids = v.tokenize_text(cap).unwrap();
                assert_eq!(&v.detokenize_text(&ids).unwrap(), cap);
                assert!(ids.iter().all(|&id| v.is_text(id)));
                count += 1;
            }
        }
        assert!(count >= 1000);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = vocab();
        let mut ids = vec![v.visual_base(); 64];
        ids[5] = 0; // BOS is not visual
        assert!(v.detokenize_frame(&ids, 8, 8).is_err());
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back, v);
        assert_eq!(back.word_id("bounces").unwrap(), v.word_id("bounces").unwrap());
    }
}
