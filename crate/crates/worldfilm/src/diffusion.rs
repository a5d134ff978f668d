//! Conditional denoising diffusion decoder: films a latent state (and the
//! previous observation) into a short clip of palette video.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{insert_layernorm, insert_linear, layernorm, linear, randn_mat, ParamStore};
use crate::synthworld::Frame;
use crate::util::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_m: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 200, beta_1: 1e-4, beta_m: 0.02 }
    }
}

/// Linear beta schedule with cumulative-product alpha-bar.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(m: usize, beta_1: f64, beta_m: f64) -> Result<NoiseSchedule> {
    if m < 2 {
        return Err(Error::Argument("schedule needs at least 2 steps".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_m && beta_m < 1.0) {
        return Err(Error::Argument("need 0 < beta_1 <= beta_m < 1".into()));
    }
    if 1.0 - beta_1 < 0.99 {
        return Err(Error::Argument("beta_1 too large: alpha_bar[0] must be >= 0.99".into()));
    }
    let mut betas = Vec::with_capacity(m);
    for i in 0..m {
        betas.push(beta_1 + (beta_m - beta_1) * i as f64 / (m - 1) as f64);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(m);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_1, cfg.beta_m)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// A clip as a continuous tensor: rows indexed by (frame, y, x), three color
/// channels in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Mat,
}

impl ClipTensor {
    pub fn pixels(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// The last frame as an `(H*W) x 3` matrix, for previous-clip conditioning.
    pub fn last_frame(&self) -> Mat {
        let hw = self.height * self.width;
        self.data.slice(s![(self.frames - 1) * hw.., ..]).to_owned()
    }
}

/// Map palette frames to a [-1, 1] color tensor.
pub fn frames_to_clip(frames: &[Frame], palette: &[[f64; 3]]) -> ClipTensor {
    assert!(!frames.is_empty());
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = Mat::zeros((frames.len() * h * w, 3));
    let mut row = 0;
    for f in frames {
        for &p in f.grid.iter() {
            let c = palette[p as usize];
            data[[row, 0]] = c[0];
            data[[row, 1]] = c[1];
            data[[row, 2]] = c[2];
            row += 1;
        }
    }
    ClipTensor { frames: frames.len(), height: h, width: w, data }
}

/// A single frame as an `(H*W) x 3` condition matrix.
pub fn frame_to_pixels(frame: &Frame, palette: &[[f64; 3]]) -> Mat {
    frames_to_clip(std::slice::from_ref(frame), palette).data
}

/// Nearest-palette-color decode; ties break toward the lowest palette index.
pub fn clip_to_frames(clip: &ClipTensor, palette: &[[f64; 3]]) -> Vec<Frame> {
    let hw = clip.height * clip.width;
    let mut frames = Vec::with_capacity(clip.frames);
    for f in 0..clip.frames {
        let mut grid = Array2::<u8>::zeros((clip.height, clip.width));
        for i in 0..hw {
            let row = clip.data.row(f * hw + i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (pi, c) in palette.iter().enumerate() {
                let d = (row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2) + (row[2] - c[2]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = pi;
                }
            }
            grid[[i / clip.width, i % clip.width]] = best as u8;
        }
        frames.push(Frame { grid });
    }
    frames
}

/// Smallest Euclidean distance between two distinct palette colors.
pub fn min_palette_gap(palette: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..palette.len() {
        for j in i + 1..palette.len() {
            let d = (0..3).map(|k| (palette[i][k] - palette[j][k]).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Largest Euclidean distance between two palette colors.
pub fn max_palette_gap(palette: &[[f64; 3]]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..palette.len() {
        for j in i + 1..palette.len() {
            let d = (0..3).map(|k| (palette[i][k] - palette[j][k]).powi(2)).sum::<f64>().sqrt();
            best = best.max(d);
        }
    }
    best
}

/// Forward noising: `x_m = sqrt(abar_m) x0 + sqrt(1 - abar_m) eps`.
pub fn q_sample(x0: &Mat, m: usize, eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    if eps.dim() != x0.dim() {
        return Err(Error::Argument("noise shape must match x0".into()));
    }
    if m >= schedule.len() {
        return Err(Error::Argument(format!("timestep {m} out of range")));
    }
    let ab = schedule.alpha_bar[m];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

pub fn randn_like(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_dec: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Width of the state condition rows (the sequence model's d_model).
    pub d_state: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of diffusion timesteps the time embedding table covers.
    pub m_steps: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_dec == 0 || self.d_dec % self.n_heads != 0 {
            return Err(Error::Config("d_dec must be divisible by n_heads".into()));
        }
        if self.n_blocks == 0 || self.m_steps < 2 {
            return Err(Error::Config("decoder needs blocks and timesteps".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// State condition for the decoder's cross-attention.
#[derive(Clone, Copy)]
pub enum StateCond<'a> {
    /// A tape node (gradients flow into whatever produced it).
    Node(Var),
    /// A constant matrix (frozen condition).
    Const(&'a Mat),
    /// Dropped: the learned null embedding is used instead.
    Null,
}

/// Epsilon-prediction network. Per-pixel tokens carry the noisy clip plus
/// previous-frame channels; blocks mix pixels by self-attention and read the
/// state condition by cross-attention.
pub struct DecoderNet {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
}

impl DecoderNet {
    pub fn new(cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_dec;
        let mut p = ParamStore::new("decoder");
        insert_linear(&mut p, rng, "in_proj", 6, d);
        p.insert("pos_emb", randn_mat(rng, cfg.pixels(), d, 0.02));
        p.insert("time_emb", randn_mat(rng, cfg.m_steps, d, 0.02));
        p.insert("null_cond", randn_mat(rng, 1, cfg.d_state, 0.02));
        for b in 0..cfg.n_blocks {
            insert_layernorm(&mut p, &format!("b{b}.ln1"), d);
            insert_linear(&mut p, rng, &format!("b{b}.sa.wq"), d, d);
            insert_linear(&mut p, rng, &format!("b{b}.sa.wk"), d, d);
            insert_linear(&mut p, rng, &format!("b{b}.sa.wv"), d, d);
            insert_linear(&mut p, rng, &format!("b{b}.sa.wo"), d, d);
            insert_layernorm(&mut p, &format!("b{b}.ln2"), d);
            insert_linear(&mut p, rng, &format!("b{b}.ca.wq"), d, d);
            insert_linear(&mut p, rng, &format!("b{b}.ca.wk"), cfg.d_state, d);
            insert_linear(&mut p, rng, &format!("b{b}.ca.wv"), cfg.d_state, d);
            insert_linear(&mut p, rng, &format!("b{b}.ca.wo"), d, d);
            insert_layernorm(&mut p, &format!("b{b}.ln3"), d);
            insert_linear(&mut p, rng, &format!("b{b}.mlp.w1"), d, 4 * d);
            insert_linear(&mut p, rng, &format!("b{b}.mlp.w2"), 4 * d, d);
        }
        insert_layernorm(&mut p, "lnf", d);
        insert_linear(&mut p, rng, "out_proj", d, 3);
        Ok(Self { cfg, params: p })
    }

    /// Build the per-pixel input channels. A dropped previous-clip condition
    /// becomes zero channels without ever touching `o_prev`.
    fn input_channels(&self, x_m: &Mat, o_prev: Option<&Mat>) -> Mat {
        let p = self.cfg.pixels();
        let hw = self.cfg.height * self.cfg.width;
        let mut xin = Mat::zeros((p, 6));
        xin.slice_mut(s![.., 0..3]).assign(x_m);
        if let Some(prev) = o_prev {
            assert_eq!(prev.dim(), (hw, 3), "o_prev must be a single frame");
            for row in 0..p {
                let src = prev.row(row % hw);
                xin[[row, 3]] = src[0];
                xin[[row, 4]] = src[1];
                xin[[row, 5]] = src[2];
            }
        }
        xin
    }

    fn attention(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
    ) -> Var {
        let d = self.cfg.d_dec;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctxs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
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

    /// Predict the noise for `x_m` at timestep `m` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x_m: &Mat,
        m: usize,
        state: StateCond,
        o_prev: Option<&Mat>,
    ) -> Result<Var> {
        if m >= self.cfg.m_steps {
            return Err(Error::Argument(format!("timestep {m} out of range")));
        }
        if x_m.dim() != (self.cfg.pixels(), 3) {
            return Err(Error::Argument("clip tensor shape mismatch".into()));
        }
        let p = &self.params;
        let xin = tape.leaf(self.input_channels(x_m, o_prev));
        let mut h = linear(tape, p, "in_proj", xin);
        let pos = p.var(tape, "pos_emb");
        h = tape.add(h, pos);
        let time = p.var(tape, "time_emb");
        let trow = tape.gather_rows(time, &[m]);
        h = tape.add_row(h, trow);

        let cond: Var = match state {
            StateCond::Node(v) => v,
            StateCond::Const(mat) => {
                if mat.ncols() != self.cfg.d_state {
                    return Err(Error::Argument("state condition width mismatch".into()));
                }
                tape.leaf(mat.clone())
            }
            StateCond::Null => p.var(tape, "null_cond"),
        };

        for b in 0..self.cfg.n_blocks {
            let pre = layernorm(tape, p, &format!("b{b}.ln1"), h);
            let q = linear(tape, p, &format!("b{b}.sa.wq"), pre);
            let k = linear(tape, p, &format!("b{b}.sa.wk"), pre);
            let v = linear(tape, p, &format!("b{b}.sa.wv"), pre);
            let ctx = self.attention(tape, q, k, v, self.cfg.n_heads);
            let ctx = linear(tape, p, &format!("b{b}.sa.wo"), ctx);
            h = tape.add(h, ctx);

            let pre = layernorm(tape, p, &format!("b{b}.ln2"), h);
            let q = linear(tape, p, &format!("b{b}.ca.wq"), pre);
            let k = linear(tape, p, &format!("b{b}.ca.wk"), cond);
            let v = linear(tape, p, &format!("b{b}.ca.wv"), cond);
            let ctx = self.attention(tape, q, k, v, self.cfg.n_heads);
            let ctx = linear(tape, p, &format!("b{b}.ca.wo"), ctx);
            h = tape.add(h, ctx);

            let pre = layernorm(tape, p, &format!("b{b}.ln3"), h);
            let mid = linear(tape, p, &format!("b{b}.mlp.w1"), pre);
            let mid = tape.silu(mid);
            let mid = linear(tape, p, &format!("b{b}.mlp.w2"), mid);
            h = tape.add(h, mid);
        }
        let h = layernorm(tape, p, "lnf", h);
        Ok(linear(tape, p, "out_proj", h))
    }

    /// Denoising objective: draw a timestep and unit-normal noise, apply
    /// independent condition dropout, and return the mean squared error node.
    pub fn denoise_loss(
        &self,
        tape: &mut Tape,
        x0: &ClipTensor,
        state: StateCond,
        o_prev: Option<&Mat>,
        schedule: &NoiseSchedule,
        p_drop: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let m = rng.random_range(0..schedule.len());
        let eps = randn_like(rng, x0.data.nrows(), 3);
        let x_m = q_sample(&x0.data, m, &eps, schedule)?;
        let state = if p_drop > 0.0 && rng.random::<f64>() < p_drop { StateCond::Null } else { state };
        let o_prev = if p_drop > 0.0 && rng.random::<f64>() < p_drop { None } else { o_prev };
        let eps_hat = self.forward(tape, &x_m, m, state, o_prev)?;
        let loss = tape.mse_const(eps_hat, &eps);
        let v = tape.value(loss)[[0, 0]];
        if !v.is_finite() {
            return Err(Error::Numerical(format!("denoise loss not finite at timestep {m}")));
        }
        Ok(loss)
    }

    /// Plain epsilon prediction (no gradients), optionally with
    /// classifier-free guidance over the state condition (w = 1 disables it).
    pub fn predict_eps(
        &self,
        x_m: &Mat,
        m: usize,
        state: Option<&Mat>,
        o_prev: Option<&Mat>,
        guidance: f64,
    ) -> Result<Mat> {
        let cond = match state {
            Some(sm) => StateCond::Const(sm),
            None => StateCond::Null,
        };
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x_m, m, cond, o_prev)?;
        let mut eps = tape.value(out).clone();
        if (guidance - 1.0).abs() > 1e-12 && state.is_some() {
            let mut t2 = Tape::new();
            let un = self.forward(&mut t2, x_m, m, StateCond::Null, o_prev)?;
            let eps_un = t2.value(un);
            eps = eps_un + (eps - eps_un) * guidance;
        }
        Ok(eps)
    }
}

/// Anything that predicts the injected noise for `x_m` at timestep `m`.
pub trait EpsModel {
    fn predict(&self, x_m: &Mat, m: usize) -> Result<Mat>;
}

/// A decoder bound to fixed conditions, usable by the generic sampler.
pub struct ConditionedDecoder<'a> {
    pub net: &'a DecoderNet,
    pub state: Option<&'a Mat>,
    pub o_prev: Option<&'a Mat>,
    pub guidance: f64,
}

impl EpsModel for ConditionedDecoder<'_> {
    fn predict(&self, x_m: &Mat, m: usize) -> Result<Mat> {
        self.net.predict_eps(x_m, m, self.state, self.o_prev, self.guidance)
    }
}

/// Monte-Carlo value of the denoising objective for any predictor.
pub fn denoise_loss_value(
    model: &dyn EpsModel,
    x0: &Mat,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let m = rng.random_range(0..schedule.len());
    let eps = randn_like(rng, x0.nrows(), x0.ncols());
    let x_m = q_sample(x0, m, &eps, schedule)?;
    let e = model.predict(&x_m, m)?;
    let d = &e - &eps;
    Ok(d.mapv(|x| x * x).mean().unwrap())
}

/// Evenly spaced ascending timesteps ending at M-1.
fn sample_timesteps(m_total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|j| ((j + 1) * m_total) / steps - 1).collect()
}

/// Ancestral sampling from unit-normal noise down to x0 (unclamped).
pub fn ancestral_sample_raw(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    rows: usize,
    cols: usize,
    steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Mat> {
    if steps == 0 || steps > schedule.len() {
        return Err(Error::Argument(format!(
            "steps {steps} out of range for schedule of length {}",
            schedule.len()
        )));
    }
    let ts = sample_timesteps(schedule.len(), steps);
    let mut x = randn_like(rng, rows, cols);
    for j in (0..steps).rev() {
        let t = ts[j];
        let ab_t = schedule.alpha_bar[t];
        let ab_prev = if j > 0 { schedule.alpha_bar[ts[j - 1]] } else { 1.0 };
        let eps_hat = model.predict(&x, t)?;
        let x0_hat = (&x - &(&eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        let sigma2 = ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
        let dir = (1.0 - ab_prev - sigma2).max(0.0).sqrt();
        x = &x0_hat * ab_prev.sqrt() + &eps_hat * dir;
        if j > 0 && sigma2 > 0.0 {
            let z = randn_like(rng, rows, cols);
            x = x + z * sigma2.sqrt();
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at timestep {t}")));
        }
    }
    Ok(x)
}

/// Sample a clip from the decoder, clamped to [-1, 1]. `o_prev = None` takes
/// the learned null-condition path (scene transition).
pub fn sample_clip(
    net: &DecoderNet,
    schedule: &NoiseSchedule,
    state: Option<&Mat>,
    o_prev: Option<&Mat>,
    steps: usize,
    seed: u64,
    guidance: f64,
) -> Result<ClipTensor> {
    let model = ConditionedDecoder { net, state, o_prev, guidance };
    let mut rng = derive_rng(seed, "diffusion.sample");
    let raw =
        ancestral_sample_raw(&model, schedule, net.cfg.pixels(), 3, steps, &mut rng)?;
    Ok(ClipTensor {
        frames: net.cfg.frames,
        height: net.cfg.height,
        width: net.cfg.width,
        data: raw.mapv(|v| v.clamp(-1.0, 1.0)),
    })
}

/// Tiny MLP noise predictor for 1-D targets; a self-contained sanity harness
/// for the diffusion objective independent of the video decoder.
pub struct ToyEpsNet {
    pub params: ParamStore,
    m_steps: usize,
}

impl ToyEpsNet {
    pub fn new(d_hidden: usize, m_steps: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "toyeps.init");
        let mut params = ParamStore::new("toyeps");
        params.insert("time_emb", randn_mat(&mut rng, m_steps, d_hidden, 0.02));
        insert_linear(&mut params, &mut rng, "in", 1, d_hidden);
        insert_linear(&mut params, &mut rng, "hid", d_hidden, d_hidden);
        insert_linear(&mut params, &mut rng, "out", d_hidden, 1);
        Self { params, m_steps }
    }

    pub fn forward(&self, tape: &mut Tape, x_m: &Mat, m: usize) -> Result<Var> {
        if x_m.ncols() != 1 {
            return Err(Error::Argument("toy model is one-dimensional".into()));
        }
        if m >= self.m_steps {
            return Err(Error::Argument(format!("timestep {m} out of range")));
        }
        let x = tape.leaf(x_m.clone());
        let h = linear(tape, &self.params, "in", x);
        let te = self.params.var(tape, "time_emb");
        let te_row = tape.gather_rows(te, &[m]);
        let h = tape.add_row(h, te_row);
        let h = tape.silu(h);
        let h2 = linear(tape, &self.params, "hid", h);
        let h2 = tape.silu(h2);
        let h = tape.add(h, h2);
        Ok(linear(tape, &self.params, "out", h))
    }

    /// Train against samples of `N(mean, std^2)` with Adam; returns the loss
    /// curve.
    pub fn train_gaussian(
        &mut self,
        mean: f64,
        std: f64,
        schedule: &NoiseSchedule,
        iterations: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if schedule.len() != self.m_steps {
            return Err(Error::Argument("schedule length mismatch".into()));
        }
        let mut rng = derive_rng(seed, "toyeps.train");
        let mut losses = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let x0 = randn_like(&mut rng, batch, 1) * std + mean;
            let m = rng.random_range(0..schedule.len());
            let eps = randn_like(&mut rng, batch, 1);
            let x_m = q_sample(&x0, m, &eps, schedule)?;
            let mut tape = Tape::new();
            let pred = self.forward(&mut tape, &x_m, m)?;
            let loss = tape.mse_const(pred, &eps);
            let lv = tape.value(loss)[[0, 0]];
            if !lv.is_finite() {
                return Err(Error::Numerical("toy diffusion loss diverged".into()));
            }
            losses.push(lv);
            let grads = tape.backward(loss);
            self.params.adam_step(&grads, lr, &|_| true);
        }
        Ok(losses)
    }
}

impl EpsModel for ToyEpsNet {
    fn predict(&self, x_m: &Mat, m: usize) -> Result<Mat> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x_m, m)?;
        Ok(tape.value(out).clone())
    }
}
