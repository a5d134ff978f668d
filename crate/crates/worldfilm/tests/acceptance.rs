//! End-to-end acceptance suite (custom harness): one pass/fail line per
//! criterion, non-zero exit if any criterion fails.
//!
//! The suite drives the real CLI binary for the full pipeline (twice, for the
//! determinism criterion) and exercises the library directly for the
//! property-based criteria. Everything is seeded; a passing run is exactly
//! reproducible.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use worldfilm::autodiff::{Mat, Tape};
use worldfilm::dataset::read_dataset;
use worldfilm::diffusion::{
    ancestral_sample_raw, clip_to_frames, frame_to_pixels, make_schedule, q_sample, randn_like,
    sample_clip, ClipTensor, DecoderConfig, DecoderNet, EpsModel, NoiseSchedule, ScheduleConfig,
    StateCond, ToyEpsNet,
};
use worldfilm::error::Result;
use worldfilm::eval::subject_consistency;
use worldfilm::rollout::{rollout, rollout_lastframe_baseline, RolloutConfig};
use worldfilm::seqmodel::Element;
use worldfilm::synthworld::{
    color_word, palette_colors, simulate_episode, Caption, Episode, Frame, MOTION_VERBS,
    SCENE_DESCRIPTORS, SHAPE_KINDS,
};
use worldfilm::tokenize::{Special, Vocabulary};
use worldfilm::train::{load_checkpoint, save_checkpoint, WorldModel};
use worldfilm::util::{derive_rng, derive_seed};

struct Outcome {
    name: &'static str,
    detail: std::result::Result<String, String>,
    secs: f64,
    budget_secs: f64,
}

fn report(num: usize, o: &Outcome) {
    let (verdict, detail) = match &o.detail {
        Ok(d) => ("PASS", d.clone()),
        Err(d) => ("FAIL", d.clone()),
    };
    let within = o.secs <= o.budget_secs;
    println!(
        "criterion {:>2} {:<28} {} [{:.1}s / budget {:.0}s{}] {}",
        num,
        o.name,
        verdict,
        o.secs,
        o.budget_secs,
        if within { "" } else { " EXCEEDED" },
        detail
    );
}

fn run_criterion(
    num: usize,
    name: &'static str,
    budget_secs: f64,
    extra_secs: f64,
    f: impl FnOnce() -> std::result::Result<String, String>,
) -> Outcome {
    let t = Instant::now();
    let detail = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
    let mut o = Outcome { name, detail, secs: t.elapsed().as_secs_f64() + extra_secs, budget_secs };
    if o.secs > o.budget_secs && o.detail.is_ok() {
        o.detail = Err(format!(
            "passed checks but exceeded the runtime budget ({:.1}s > {:.0}s)",
            o.secs, o.budget_secs
        ));
    }
    report(num, &o);
    o
}

// ---------------------------------------------------------------------------
// CLI pipeline driver
// ---------------------------------------------------------------------------

struct PipelineRun {
    root: PathBuf,
    /// Wall-clock seconds per step: gen-data, stage0..3, rollout, eval, report.
    step_secs: [f64; 8],
    total_secs: f64,
}

fn cli(root: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_worldfilm"))
        .arg("--out-root")
        .arg(root)
        .args(args)
        .env_remove("WORLDFILM_OUT_ROOT")
        .output()
        .expect("failed to spawn the worldfilm binary");
    if !out.status.success() {
        panic!(
            "worldfilm {:?} failed (status {:?}):\n{}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn full_pipeline(root: &Path) -> PipelineRun {
    if root.exists() {
        std::fs::remove_dir_all(root).expect("clear previous run dir");
    }
    std::fs::create_dir_all(root).expect("create run dir");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into()],
        vec!["pretrain-decoder".into(), "--out".into(), p("ck0")],
        vec!["align".into(), "--checkpoint".into(), p("ck0"), "--out".into(), p("ck1")],
        vec!["pretrain".into(), "--checkpoint".into(), p("ck1"), "--out".into(), p("ck2")],
        vec!["train-wm".into(), "--checkpoint".into(), p("ck2"), "--out".into(), p("ck3")],
        vec![
            "rollout".into(),
            "--checkpoint".into(),
            p("ck3"),
            "--seed".into(),
            "1".into(),
            "--out".into(),
            p("rollout"),
        ],
        vec![
            "eval".into(),
            "--episodes".into(),
            p("rollout"),
            "--truth".into(),
            p("data"),
            "--out".into(),
            p("eval"),
            "--mode".into(),
            "worldmodel".into(),
        ],
        vec![
            "report".into(),
            "--metrics".into(),
            root.join("eval/metrics.json").to_string_lossy().into_owned(),
            "--out".into(),
            p("report"),
        ],
    ];
    let t0 = Instant::now();
    let mut step_secs = [0.0; 8];
    for (i, step) in steps.iter().enumerate() {
        let t = Instant::now();
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        cli(root, &args);
        step_secs[i] = t.elapsed().as_secs_f64();
    }
    PipelineRun { root: root.to_path_buf(), step_secs, total_secs: t0.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------------------
// Criterion 1: tokenizer bijectivity
// ---------------------------------------------------------------------------

fn c1_tokenizer() -> std::result::Result<String, String> {
    let vocab = Vocabulary::new(8);
    let mut rng = derive_rng(101, "acc.c1");
    for i in 0..1000 {
        let grid = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..8u8));
        let frame = Frame { grid };
        let ids = vocab.tokenize_frame(&frame).map_err(|e| e.to_string())?;
        let back = vocab.detokenize_frame(&ids, 8, 8).map_err(|e| e.to_string())?;
        if back != frame {
            return Err(format!("frame {i} did not round-trip bitwise"));
        }
    }
    for i in 0..1000 {
        let color = color_word(rng.random_range(1..8)).to_string();
        let shape = SHAPE_KINDS[rng.random_range(0..SHAPE_KINDS.len())].to_string();
        let verb = MOTION_VERBS[rng.random_range(0..MOTION_VERBS.len())].to_string();
        let words = if rng.random::<bool>() {
            let desc = SCENE_DESCRIPTORS[rng.random_range(0..SCENE_DESCRIPTORS.len())];
            vec![
                "scene".into(),
                "changes".into(),
                "to".into(),
                desc.to_string(),
                color,
                shape,
                verb,
            ]
        } else {
            vec![color, shape, verb]
        };
        let cap = Caption::new(words).map_err(|e| e.to_string())?;
        let ids = vocab.tokenize_text(&cap).map_err(|e| e.to_string())?;
        let back = vocab.detokenize_text(&ids).map_err(|e| e.to_string())?;
        if back != cap {
            return Err(format!("caption {i} did not round-trip exactly"));
        }
    }
    Ok("1000 frames + 1000 captions round-trip".into())
}

// ---------------------------------------------------------------------------
// Criterion 2: schedule monotonicity + noising statistics
// ---------------------------------------------------------------------------

fn c2_schedule() -> std::result::Result<String, String> {
    let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).map_err(|e| e.to_string())?;
    if sched.len() != 200 {
        return Err(format!("expected a 200-step schedule, got {}", sched.len()));
    }
    for m in 1..sched.len() {
        if sched.alpha_bar[m] >= sched.alpha_bar[m - 1] {
            return Err(format!("alpha_bar not strictly decreasing at step {m}"));
        }
    }
    let mut rng = derive_rng(102, "acc.c2");
    let x0 = Mat::zeros((1, 1));
    let mut worst: f64 = 0.0;
    for &m in &[10usize, 100, 199] {
        let n = 10_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let eps = randn_like(&mut rng, 1, 1);
            let xm = q_sample(&x0, m, &eps, &sched).map_err(|e| e.to_string())?;
            let v = xm[[0, 0]];
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let want = 1.0 - sched.alpha_bar[m];
        let rel = (var - want).abs() / want;
        worst = worst.max(rel);
        if rel > 0.02 {
            return Err(format!(
                "q_sample variance at m={m}: {var:.5} vs closed form {want:.5} ({:.2}% off)",
                rel * 100.0
            ));
        }
    }
    Ok(format!("alpha_bar strictly decreasing; worst variance error {:.2}%", worst * 100.0))
}

// ---------------------------------------------------------------------------
// Criterion 3: gradient check on a micro decoder
// ---------------------------------------------------------------------------

fn c3_gradcheck() -> std::result::Result<String, String> {
    let cfg = DecoderConfig {
        d_dec: 4,
        n_blocks: 1,
        n_heads: 2,
        d_state: 4,
        frames: 1,
        height: 2,
        width: 2,
        m_steps: 8,
    };
    let mut rng = derive_rng(103, "acc.c3.init");
    let mut net = DecoderNet::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let n_params = net.params.num_scalars();
    if n_params > 1000 {
        return Err(format!("micro net has {n_params} parameters (> 1000)"));
    }
    let sched = make_schedule(8, 1e-2, 0.2).map_err(|e| e.to_string())?;
    let x0 = ClipTensor { frames: 1, height: 2, width: 2, data: randn_like(&mut rng, 4, 3) };
    let state = randn_like(&mut rng, 2, 4);
    let o_prev = randn_like(&mut rng, 4, 3);

    // The loss as a pure function of the parameters: the internal timestep /
    // noise / dropout draws are re-derived from a fixed seed on every call.
    let loss_of = |net: &DecoderNet| -> (Tape, worldfilm::autodiff::Var) {
        let mut tape = Tape::new();
        let mut lrng = derive_rng(103, "acc.c3.loss");
        let loss = net
            .denoise_loss(&mut tape, &x0, StateCond::Const(&state), Some(&o_prev), &sched, 0.5, &mut lrng)
            .expect("denoise loss");
        (tape, loss)
    };

    let (tape, loss) = loss_of(&net);
    let grads = tape.backward(loss);
    let keys: Vec<String> = net.params.keys().map(str::to_string).collect();

    let mut probes = Vec::new();
    let mut prng = derive_rng(103, "acc.c3.probes");
    let mut guard = 0;
    while probes.len() < 20 {
        guard += 1;
        if guard > 10_000 {
            return Err("could not find 20 well-conditioned parameter probes".into());
        }
        let key = &keys[prng.random_range(0..keys.len())];
        let mat = net.params.get(key);
        let idx = (prng.random_range(0..mat.nrows()), prng.random_range(0..mat.ncols()));
        let g = grads.get("decoder", key).map(|g| g[idx]).unwrap_or(0.0);
        // skip coordinates whose gradient is numerically negligible: the
        // finite-difference signal there is dominated by round-off
        if g.abs() < 1e-6 || probes.iter().any(|(k, i, _)| k == key && *i == idx) {
            continue;
        }
        probes.push((key.clone(), idx, g));
    }

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (key, idx, analytic) in &probes {
        let orig = net.params.get(key)[*idx];
        net.params.get_mut(key)[*idx] = orig + h;
        let (tp, lp) = loss_of(&net);
        let fp = tp.value(lp)[[0, 0]];
        net.params.get_mut(key)[*idx] = orig - h;
        let (tm, lm) = loss_of(&net);
        let fm = tm.value(lm)[[0, 0]];
        net.params.get_mut(key)[*idx] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        if rel > 1e-3 {
            return Err(format!(
                "gradient mismatch at {key}{idx:?}: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.2e})"
            ));
        }
    }
    Ok(format!("{n_params} params, 20 probes, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// Criterion 4: sampler sanity
// ---------------------------------------------------------------------------

struct ZeroEps;

impl EpsModel for ZeroEps {
    fn predict(&self, x_m: &Mat, _m: usize) -> Result<Mat> {
        Ok(Mat::zeros(x_m.raw_dim()))
    }
}

fn c4_sampler() -> std::result::Result<String, String> {
    // With eps_hat == 0 the ancestral update is an exact linear recursion on
    // the sample variance; the Monte-Carlo variance must match it.
    let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).map_err(|e| e.to_string())?;
    let steps = 40;
    let m_total = sched.len();
    let ts: Vec<usize> = (0..steps).map(|j| ((j + 1) * m_total) / steps - 1).collect();
    let mut v = 1.0;
    for j in (0..steps).rev() {
        let ab_t = sched.alpha_bar[ts[j]];
        let ab_prev = if j > 0 { sched.alpha_bar[ts[j - 1]] } else { 1.0 };
        let sigma2 = ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
        v *= ab_prev / ab_t;
        if j > 0 && sigma2 > 0.0 {
            v += sigma2;
        }
    }
    let mut rng = derive_rng(104, "acc.c4.zero");
    let n = 20_000;
    let out = ancestral_sample_raw(&ZeroEps, &sched, n, 1, steps, &mut rng)
        .map_err(|e| e.to_string())?;
    let mean = out.sum() / n as f64;
    let var = out.mapv(|x| (x - mean) * (x - mean)).sum() / n as f64;
    let rel = (var - v).abs() / v;
    if rel > 0.05 {
        return Err(format!(
            "zero-predictor variance {var:.4} vs recursion {v:.4} ({:.1}% off)",
            rel * 100.0
        ));
    }

    // 1-D Gaussian toy: train a tiny noise predictor and moment-match.
    let (want_mean, want_std) = (1.5, 0.5);
    let toy_sched = make_schedule(64, 1e-4, 0.3).map_err(|e| e.to_string())?;
    let mut net = ToyEpsNet::new(48, toy_sched.len(), 11);
    net.train_gaussian(want_mean, want_std, &toy_sched, 8000, 128, 3e-3, 11)
        .map_err(|e| e.to_string())?;
    let mut srng = derive_rng(11, "toy.sample");
    let samples = ancestral_sample_raw(&net, &toy_sched, 4000, 1, toy_sched.len(), &mut srng)
        .map_err(|e| e.to_string())?;
    let ns = samples.len() as f64;
    let got_mean = samples.sum() / ns;
    let got_std = (samples.mapv(|x| (x - got_mean) * (x - got_mean)).sum() / ns).sqrt();
    if (got_mean - want_mean).abs() >= 0.05 {
        return Err(format!("toy mean {got_mean:.4} vs target {want_mean} (|err| >= 0.05)"));
    }
    if (got_std - want_std).abs() / want_std >= 0.25 {
        return Err(format!("toy sigma {got_std:.4} vs target {want_std} (> 25% off)"));
    }
    Ok(format!(
        "variance within {:.1}%; toy N({got_mean:.3}, {got_std:.3}^2) vs N({want_mean}, {want_std}^2)",
        rel * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5: causality and state properties
// ---------------------------------------------------------------------------

fn state_rows(wm: &WorldModel, ep: &Episode, replace_obs0: Option<&Episode>, t: usize) -> Vec<u64> {
    let mut seq = wm.episode_worldmodel_sequence(ep).expect("sequence");
    if let Some(other) = replace_obs0 {
        let donor = wm.episode_worldmodel_sequence(other).expect("donor sequence");
        let range = seq.triplets[0].obs_range.clone();
        let drange = donor.triplets[0].obs_range.clone();
        assert_eq!(range.len(), drange.len());
        for (i, j) in range.zip(drange) {
            seq.elements[i] = donor.elements[j].clone();
        }
    }
    let mut tape = Tape::new();
    let out = wm.model.forward(&mut tape, &seq, false).expect("forward");
    let hidden = tape.value(out.hidden);
    let span = seq.triplets[t].state_range.clone();
    let mut bits = Vec::new();
    for r in span {
        for c in 0..hidden.ncols() {
            bits.push(hidden[[r, c]].to_bits());
        }
    }
    bits
}

fn c5_causality(run: &Path) -> std::result::Result<String, String> {
    let wm = load_checkpoint(&run.join("ck3")).map_err(|e| e.to_string())?;
    let data = read_dataset(&run.join("data")).map_err(|e| e.to_string())?;
    let (_, holdout) = wm.split(&data);
    let ep = &holdout[0];
    let seq = wm.episode_worldmodel_sequence(ep).map_err(|e| e.to_string())?;
    let t_mid = seq.triplets.len() / 2;
    let cut = seq.triplets[t_mid].state_range.end;
    let baseline = state_rows(&wm, ep, None, t_mid);

    // 100 random perturbations strictly after the state block: read_state(t)
    // must be bitwise unchanged (causal attention cannot look forward).
    let mut rng = derive_rng(105, "acc.c5.perturb");
    let vocab_size = wm.model.cfg.vocab_size as u32;
    for i in 0..100 {
        let mut pseq = seq.clone();
        let n_edits = 1 + rng.random_range(0..4usize);
        for _ in 0..n_edits {
            let pos = rng.random_range(cut..pseq.elements.len());
            pseq.elements[pos] = match pseq.elements[pos] {
                Element::Token(_) => Element::Token(rng.random_range(0..vocab_size)),
                Element::StateQuery(_) => {
                    Element::StateQuery(rng.random_range(0..wm.model.cfg.q_slots))
                }
            };
        }
        let mut tape = Tape::new();
        let out = wm.model.forward(&mut tape, &pseq, false).map_err(|e| e.to_string())?;
        let hidden = tape.value(out.hidden);
        let span = pseq.triplets[t_mid].state_range.clone();
        let mut bits = Vec::new();
        for r in span {
            for c in 0..hidden.ncols() {
                bits.push(hidden[[r, c]].to_bits());
            }
        }
        if bits != baseline {
            return Err(format!("suffix perturbation {i} changed read_state({t_mid})"));
        }
    }

    // Replacing the first observation must change later states (L2 > 0).
    let replaced = state_rows(&wm, ep, Some(&holdout[1]), t_mid);
    let l2: f64 = baseline
        .iter()
        .zip(&replaced)
        .map(|(&a, &b)| {
            let d = f64::from_bits(a) - f64::from_bits(b);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    if l2 <= 0.0 {
        return Err("read_state is insensitive to o_0 replacement (L2 == 0)".into());
    }

    // Fixed seeds reproduce bitwise-identical rollouts.
    let init = simulate_episode(&wm.cfg.world, derive_seed(1, "rollout.init"))
        .map_err(|e| e.to_string())?;
    let rcfg = RolloutConfig { clips: 4, scene_breaks: vec![2], seed: 1, ..Default::default() };
    let tr1 = rollout(&wm, &init.initial_frame, &init.initial_caption, &rcfg)
        .map_err(|e| e.to_string())?;
    let tr2 = rollout(&wm, &init.initial_frame, &init.initial_caption, &rcfg)
        .map_err(|e| e.to_string())?;
    if tr1.clips != tr2.clips || tr1.dynamics != tr2.dynamics {
        return Err("repeated rollout with a fixed seed is not bitwise identical".into());
    }
    for (a, b) in tr1.states.iter().zip(&tr2.states) {
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err("repeated rollout produced different latent states".into());
        }
    }
    Ok(format!("100 suffix perturbations invariant; o_0 sensitivity L2 {l2:.3}; rollouts bit-identical"))
}

// ---------------------------------------------------------------------------
// Criterion 6: stage-1 alignment improvement
// ---------------------------------------------------------------------------

fn c6_alignment(run: &Path) -> std::result::Result<String, String> {
    let data = read_dataset(&run.join("data")).map_err(|e| e.to_string())?;
    let before = load_checkpoint(&run.join("ck0")).map_err(|e| e.to_string())?;
    let init_mse = before.alignment_holdout_mse(&data).map_err(|e| e.to_string())?;
    let after = load_checkpoint(&run.join("ck1")).map_err(|e| e.to_string())?;
    let trained_mse = after.alignment_holdout_mse(&data).map_err(|e| e.to_string())?;
    if trained_mse > 0.1 * init_mse {
        return Err(format!(
            "held-out alignment MSE {trained_mse:.5} vs init {init_mse:.5} (need <= 0.1x)"
        ));
    }
    Ok(format!("held-out MSE {trained_mse:.5} vs init {init_mse:.5} ({:.4}x)", trained_mse / init_mse))
}

// ---------------------------------------------------------------------------
// Criterion 7: dynamics anticipation vs bigram baseline
// ---------------------------------------------------------------------------

/// Teacher-forced bigram token accuracy over the same dynamics positions the
/// model is scored on (BOD -> first word, ..., last word -> EOD). This is
/// strictly stronger than free-running bigram generation.
fn bigram_token_accuracy(vocab: &Vocabulary, train: &[Episode], holdout: &[Episode]) -> f64 {
    use std::collections::BTreeMap;
    let bod = vocab.special(Special::Bod);
    let eod = vocab.special(Special::Eod);
    let stream = |ep: &Episode| -> Vec<Vec<u32>> {
        let mut caps = vec![ep.initial_caption.clone()];
        caps.extend(ep.captions.iter().cloned());
        caps.iter()
            .map(|c| {
                let mut ids = vec![bod];
                ids.extend(vocab.tokenize_text(c).expect("caption tokens"));
                ids.push(eod);
                ids
            })
            .collect()
    };
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for ep in train {
        for ids in stream(ep) {
            for w in ids.windows(2) {
                *counts.entry(w[0]).or_default().entry(w[1]).or_default() += 1;
            }
        }
    }
    let predict = |prev: u32| -> u32 {
        counts
            .get(&prev)
            .and_then(|m| m.iter().max_by_key(|(id, &c)| (c, std::cmp::Reverse(**id))))
            .map(|(&id, _)| id)
            .unwrap_or(eod)
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for ep in holdout {
        // only the per-clip captions are scored (the initial caption is
        // context, exactly as in the model's dynamics targets)
        for cap in &ep.captions {
            let mut ids = vec![bod];
            ids.extend(vocab.tokenize_text(cap).expect("caption tokens"));
            ids.push(eod);
            for w in ids.windows(2) {
                if predict(w[0]) == w[1] {
                    hits += 1;
                }
                total += 1;
            }
        }
    }
    hits as f64 / total as f64
}

fn c7_dynamics(run: &Path) -> std::result::Result<String, String> {
    let wm = load_checkpoint(&run.join("ck3")).map_err(|e| e.to_string())?;
    let data = read_dataset(&run.join("data")).map_err(|e| e.to_string())?;
    let (train, holdout) = wm.split(&data);
    let acc = wm.dynamics_token_accuracy(holdout).map_err(|e| e.to_string())?;
    let big = bigram_token_accuracy(&wm.vocab, train, holdout);
    if acc < 0.90 {
        return Err(format!("held-out dynamics token accuracy {acc:.4} < 0.90 (bigram {big:.4})"));
    }
    if acc < big + 0.05 {
        return Err(format!("accuracy {acc:.4} not >= bigram {big:.4} + 0.05"));
    }
    Ok(format!("model {acc:.4} vs bigram {big:.4}"))
}

// ---------------------------------------------------------------------------
// Criterion 8: cross-scene consistency ablation
// ---------------------------------------------------------------------------

fn trace_consistency(clips: &[Vec<Frame>]) -> f64 {
    let frames: Vec<&Frame> = clips.iter().flat_map(|c| c.iter()).collect();
    subject_consistency(&frames)
}

fn c8_ablation(run: &Path) -> std::result::Result<String, String> {
    let wm = load_checkpoint(&run.join("ck3")).map_err(|e| e.to_string())?;
    let n_seeds = 20u64;
    let mut state_scores = Vec::new();
    let mut base_scores = Vec::new();
    for seed in 0..n_seeds {
        let init = simulate_episode(&wm.cfg.world, derive_seed(seed, "rollout.init"))
            .map_err(|e| e.to_string())?;
        let rcfg = RolloutConfig { clips: 6, scene_breaks: vec![2, 4], seed, ..Default::default() };
        let tr = rollout(&wm, &init.initial_frame, &init.initial_caption, &rcfg)
            .map_err(|e| e.to_string())?;
        let tb = rollout_lastframe_baseline(&wm, &init.initial_frame, &init.initial_caption, &rcfg)
            .map_err(|e| e.to_string())?;
        state_scores.push(trace_consistency(&tr.clips));
        base_scores.push(trace_consistency(&tb.clips));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, mb) = (mean(&state_scores), mean(&base_scores));
    let wins = state_scores.iter().zip(&base_scores).filter(|(s, b)| s > b).count();
    if ms <= mb {
        return Err(format!(
            "mean subject consistency: state {ms:.4} <= baseline {mb:.4} ({wins}/{n_seeds} wins)"
        ));
    }
    if (wins as f64) < 0.7 * n_seeds as f64 {
        return Err(format!(
            "gap positive on only {wins}/{n_seeds} paired seeds (need >= 70%); means {ms:.4} vs {mb:.4}"
        ));
    }
    Ok(format!("state {ms:.4} vs baseline {mb:.4}, {wins}/{n_seeds} paired wins"))
}

// ---------------------------------------------------------------------------
// Criterion 9: controllability + scene-break invariance
// ---------------------------------------------------------------------------

fn c9_control(run: &Path) -> std::result::Result<String, String> {
    let wm = load_checkpoint(&run.join("ck3")).map_err(|e| e.to_string())?;
    let palette = palette_colors(wm.cfg.world.palette_size);
    let init = simulate_episode(&wm.cfg.world, derive_seed(5, "rollout.init"))
        .map_err(|e| e.to_string())?;
    let ov1: Vec<String> = ["blue", "cross", "moves_up"].map(String::from).to_vec();
    let ov2: Vec<String> =
        ["scene", "changes", "to", "ocean", "red", "square", "moves_left"].map(String::from).to_vec();
    let rcfg = RolloutConfig {
        clips: 4,
        scene_breaks: vec![2],
        overrides: vec![(1, ov1.clone()), (2, ov2.clone())],
        seed: 5,
        ..Default::default()
    };
    let tr = rollout(&wm, &init.initial_frame, &init.initial_caption, &rcfg)
        .map_err(|e| e.to_string())?;
    if tr.dynamics[1] != ov1 || tr.dynamics[2] != ov2 {
        return Err(format!("overrides not verbatim in the trace: {:?}", tr.dynamics));
    }

    // At the scheduled break (clip 2) the decoder condition on the previous
    // clip must be truly dropped: re-decoding with the break rule reproduces
    // the trace clip exactly, while supplying any previous-frame pixels as a
    // condition changes the raw output.
    let seed2 = derive_seed(rcfg.seed, "rollout.clip2");
    let none_clip = sample_clip(
        &wm.decoder,
        &wm.schedule,
        Some(&tr.states[2]),
        None,
        rcfg.sample_steps,
        seed2,
        rcfg.guidance,
    )
    .map_err(|e| e.to_string())?;
    let none_frames = clip_to_frames(&none_clip, &palette);
    if none_frames != tr.clips[2] {
        return Err("break clip does not match the condition-free decode".into());
    }
    let mut rng = derive_rng(109, "acc.c9.fakes");
    for _ in 0..3 {
        let fake = Frame {
            grid: Array2::from_shape_fn((8, 8), |_| rng.random_range(0..8u8)),
        };
        let cond = frame_to_pixels(&fake, &palette);
        let with_cond = sample_clip(
            &wm.decoder,
            &wm.schedule,
            Some(&tr.states[2]),
            Some(&cond),
            rcfg.sample_steps,
            seed2,
            rcfg.guidance,
        )
        .map_err(|e| e.to_string())?;
        if with_cond.data == none_clip.data {
            return Err("decoder output ignores the previous-frame condition entirely".into());
        }
    }
    Ok("overrides verbatim; break decode condition-free and matches trace".into())
}

// ---------------------------------------------------------------------------
// Criterion 10: end-to-end determinism and persistence
// ---------------------------------------------------------------------------

fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("read {}: {e}", p.display()))
}

fn c10_determinism(a: &PipelineRun, b: &PipelineRun, tmp: &Path) -> std::result::Result<String, String> {
    for run in [a, b] {
        if run.total_secs > 45.0 * 60.0 {
            return Err(format!("pipeline run took {:.0}s (>= 45 min)", run.total_secs));
        }
    }
    for rel in ["eval/metrics.json", "report/report.json", "report/summary.txt"] {
        if read_bytes(&a.root.join(rel)) != read_bytes(&b.root.join(rel)) {
            return Err(format!("{rel} differs between the two runs"));
        }
    }
    // checkpoint round-trip: load -> save must be byte-identical
    let wm = load_checkpoint(&a.root.join("ck3")).map_err(|e| e.to_string())?;
    let rt = tmp.join("ck3_roundtrip");
    if rt.exists() {
        std::fs::remove_dir_all(&rt).map_err(|e| e.to_string())?;
    }
    save_checkpoint(&wm, &rt).map_err(|e| e.to_string())?;
    for f in ["manifest.json", "seqmodel.bin", "decoder.bin", "textenc.bin"] {
        if read_bytes(&a.root.join("ck3").join(f)) != read_bytes(&rt.join(f)) {
            return Err(format!("checkpoint file {f} changed across a load/save round-trip"));
        }
    }
    Ok(format!(
        "two runs bit-identical (metrics + report); runs took {:.0}s and {:.0}s; checkpoint round-trips",
        a.total_secs, b.total_secs
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&tmp).expect("create tmp dir");
    let mut outcomes: Vec<Outcome> = Vec::new();

    outcomes.push(run_criterion(1, "tokenizer bijectivity", 5.0, 0.0, c1_tokenizer));
    outcomes.push(run_criterion(2, "schedule + noising", 10.0, 0.0, c2_schedule));
    outcomes.push(run_criterion(3, "gradient correctness", 60.0, 0.0, c3_gradcheck));
    outcomes.push(run_criterion(4, "sampler sanity", 300.0, 0.0, c4_sampler));

    println!("running the full pipeline twice (this dominates the suite's runtime)...");
    let run_a = full_pipeline(&tmp.join("run_a"));
    println!(
        "run A steps [gen {:.0}s, s0 {:.0}s, s1 {:.0}s, s2 {:.0}s, s3 {:.0}s, rollout {:.0}s, eval {:.0}s, report {:.0}s]",
        run_a.step_secs[0],
        run_a.step_secs[1],
        run_a.step_secs[2],
        run_a.step_secs[3],
        run_a.step_secs[4],
        run_a.step_secs[5],
        run_a.step_secs[6],
        run_a.step_secs[7],
    );

    outcomes.push(run_criterion(5, "causality / state properties", 120.0, 0.0, || {
        c5_causality(&run_a.root)
    }));
    // training time for the stage under test counts toward the budget
    outcomes.push(run_criterion(6, "stage-1 alignment", 600.0, run_a.step_secs[2], || {
        c6_alignment(&run_a.root)
    }));
    outcomes.push(run_criterion(
        7,
        "dynamics anticipation",
        900.0,
        run_a.step_secs[3] + run_a.step_secs[4],
        || c7_dynamics(&run_a.root),
    ));
    outcomes.push(run_criterion(8, "consistency ablation", 1200.0, 0.0, || {
        c8_ablation(&run_a.root)
    }));
    outcomes.push(run_criterion(9, "controllability", 120.0, 0.0, || c9_control(&run_a.root)));

    let run_b = full_pipeline(&tmp.join("run_b"));
    outcomes.push(run_criterion(10, "determinism + persistence", 2700.0, 0.0, || {
        c10_determinism(&run_a, &run_b, &tmp)
    }));

    let failed = outcomes.iter().filter(|o| o.detail.is_err()).count();
    if failed == 0 {
        println!("acceptance: all {} criteria passed", outcomes.len());
    } else {
        println!("acceptance: {failed}/{} criteria FAILED", outcomes.len());
        std::process::exit(1);
    }
}
