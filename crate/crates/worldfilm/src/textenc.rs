//! Text condition encoder: maps a caption to a `Q x d_model` target matrix,
//! the same shape as the latent world state. Used to supervise state
//! alignment and to seed rollouts from a prompt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{insert_layernorm, insert_linear, layernorm, linear, randn_mat, ParamStore};
use crate::tokenize::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of pooled output rows (the state's query count).
    pub q_slots: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        if self.q_slots == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding + one bidirectional self-attention block + learned pooling
/// queries that cross-attend over the encoded tokens.
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub params: ParamStore,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut p = ParamStore::new("textenc");
        p.insert("embed", randn_mat(rng, cfg.vocab_size, d, 0.02));
        p.insert("pos_emb", randn_mat(rng, cfg.max_len, d, 0.02));
        insert_layernorm(&mut p, "ln1", d);
        insert_linear(&mut p, rng, "sa.wq", d, d);
        insert_linear(&mut p, rng, "sa.wk", d, d);
        insert_linear(&mut p, rng, "sa.wv", d, d);
        insert_linear(&mut p, rng, "sa.wo", d, d);
        insert_layernorm(&mut p, "ln2", d);
        insert_linear(&mut p, rng, "mlp.w1", d, 4 * d);
        insert_linear(&mut p, rng, "mlp.w2", 4 * d, d);
        p.insert("pool_q", randn_mat(rng, cfg.q_slots, d, 0.02));
        insert_linear(&mut p, rng, "pool.wk", d, d);
        insert_linear(&mut p, rng, "pool.wv", d, d);
        insert_linear(&mut p, rng, "pool.wo", d, d);
        insert_layernorm(&mut p, "lnf", d);
        Ok(Self { cfg, params: p })
    }

    fn multihead(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctxs = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let sc = tape.matmul(qh, kt);
            let sc = tape.scale(sc, scale);
            let pr = tape.softmax(sc, false);
            ctxs.push(tape.matmul(pr, vh));
        }
        tape.concat_cols(&ctxs)
    }

    /// Encode token ids into a `Q x d_model` matrix on the tape.
    pub fn forward(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Argument("cannot encode an empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::SequenceLength { got: ids.len(), max: self.cfg.max_len });
        }
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::Vocabulary(format!("token id {id} out of range")));
            }
        }
        let p = &self.params;
        let embed = p.var(tape, "embed");
        let rows: Vec<(Var, usize)> = ids.iter().map(|&id| (embed, id as usize)).collect();
        let mut h = tape.assemble_rows(&rows);
        let pos = p.var(tape, "pos_emb");
        let pe = tape.gather_rows(pos, &(0..ids.len()).collect::<Vec<_>>());
        h = tape.add(h, pe);

        let pre = layernorm(tape, p, "ln1", h);
        let q = linear(tape, p, "sa.wq", pre);
        let k = linear(tape, p, "sa.wk", pre);
        let v = linear(tape, p, "sa.wv", pre);
        let ctx = self.multihead(tape, q, k, v);
        let ctx = linear(tape, p, "sa.wo", ctx);
        h = tape.add(h, ctx);

        let pre = layernorm(tape, p, "ln2", h);
        let mid = linear(tape, p, "mlp.w1", pre);
        let mid = tape.silu(mid);
        let mid = linear(tape, p, "mlp.w2", mid);
        h = tape.add(h, mid);

        let pq = p.var(tape, "pool_q");
        let k = linear(tape, p, "pool.wk", h);
        let v = linear(tape, p, "pool.wv", h);
        let pooled = self.multihead(tape, pq, k, v);
        let pooled = linear(tape, p, "pool.wo", pooled);
        Ok(layernorm(tape, p, "lnf", pooled))
    }

    /// Plain-value encoding (no gradients) of a caption.
    pub fn encode_text(&self, vocab: &Vocabulary, caption: &crate::synthworld::Caption) -> Result<Mat> {
        let ids = vocab.tokenize_text(caption)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &ids)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::Caption;
    use crate::util::derive_rng;

    fn enc(seed: u64) -> (TextEncoder, Vocabulary) {
        let vocab = Vocabulary::new(8);
        let cfg = TextEncoderConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_heads: 2,
            q_slots: 4,
            max_len: 16,
        };
        let mut rng = derive_rng(seed, "textenc");
        (TextEncoder::new(cfg, &mut rng).unwrap(), vocab)
    }

    #[test]
    fn output_shape_is_q_by_d() {
        let (e, v) = enc(1);
        let c = Caption::parse("red square moves_right").unwrap();
        let out = e.encode_text(&v, &c).unwrap();
        assert_eq!(out.dim(), (4, 8));
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn deterministic_and_caption_sensitive() {
        let (e, v) = enc(2);
        let a = e.encode_text(&v, &Caption::parse("red square moves_right").unwrap()).unwrap();
        let b = e.encode_text(&v, &Caption::parse("red square moves_right").unwrap()).unwrap();
        assert_eq!(a, b);
        let c = e.encode_text(&v, &Caption::parse("red square moves_left").unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty_long_and_out_of_range() {
        let (e, v) = enc(3);
        let mut tape = Tape::new();
        assert!(e.forward(&mut tape, &[]).is_err());
        let long = vec![9u32; 17];
        assert!(matches!(
            e.forward(&mut tape, &long),
            Err(Error::SequenceLength { got: 17, max: 16 })
        ));
        assert!(e.forward(&mut tape, &[v.size() as u32]).is_err());
    }

    #[test]
    fn gradients_flow_to_used_embeddings_only() {
        let (e, _) = enc(4);
        let mut tape = Tape::new();
        let out = e.forward(&mut tape, &[3, 5]).unwrap();
        let target = Mat::zeros((4, 8));
        let loss = tape.mse_const(out, &target);
        let grads = tape.backward(loss);
        let ge = grads.get("textenc", "embed").unwrap();
        assert!(ge.row(3).iter().any(|&x| x != 0.0));
        assert!(ge.row(5).iter().any(|&x| x != 0.0));
        assert!(ge.row(7).iter().all(|&x| x == 0.0));
        // position rows beyond the sequence are untouched
        let gp = grads.get("textenc", "pos_emb").unwrap();
        assert!(gp.row(2).iter().all(|&x| x == 0.0));
    }
}
