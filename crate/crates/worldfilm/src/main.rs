//! Thin command-line entry point; all behavior lives in the library.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;

use worldfilm::config::{
    list_output_files, parse_config, read_run_manifest, write_run_manifest, RunConfig,
};
use worldfilm::dataset::{read_dataset, write_dataset, Dataset};
use worldfilm::error::{Error, Result};
use worldfilm::eval::{emit_report, evaluate_episode, MetricReport};
use worldfilm::rollout::{export_episode, rollout, rollout_lastframe_baseline};
use worldfilm::synthworld::{palette_colors, simulate_episode, Caption, Frame};
use worldfilm::train::{load_checkpoint, save_checkpoint, StageReport, WorldModel};
use worldfilm::util::derive_seed;

#[derive(Parser)]
#[command(name = "worldfilm", version, about = "Latent world model for palette video")]
struct Cli {
    /// TOML run configuration; omitted = desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for artifacts (overrides $WORLDFILM_OUT_ROOT, default "runs").
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scripted training dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 0: pretrain the diffusion decoder and text encoder.
    PretrainDecoder {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: align latent states to text encodings.
    Align {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: generative pretraining of the sequence model.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 3: joint world-model finetuning with adapters.
    TrainWm {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a video episode from the trained world model.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Text file with one row of palette digits per grid row.
        #[arg(long)]
        init_frame: Option<PathBuf>,
        /// Grammar caption, e.g. "blue cross moves_up".
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        clips: Option<usize>,
        /// Comma-separated clip indices that start a new scene.
        #[arg(long)]
        scene_breaks: Option<String>,
        /// Control override "CLIP:word word ..." (repeatable).
        #[arg(long = "override")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Last-frame-only baseline rollout (no latent state).
    RolloutBaseline {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        init_frame: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        scene_breaks: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated episodes against reference episodes.
    Eval {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label for this conditioning mode in the report.
        #[arg(long, default_value = "episodes")]
        mode: String,
    },
    /// Merge metric reports into a summary with plots.
    Report {
        /// metrics.json files from `eval` runs (repeatable).
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn out_root(cli_root: &Option<PathBuf>) -> PathBuf {
    cli_root
        .clone()
        .or_else(|| std::env::var_os("WORLDFILM_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve(root: &Path, section: &str, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join(section))
}

/// A training checkpoint is a prerequisite produced by an earlier stage;
/// its absence is a stage-order error, not an I/O error.
fn load_prereq_checkpoint(dir: &Path) -> Result<WorldModel> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::StageOrder(format!(
            "missing prerequisite checkpoint at {}",
            dir.display()
        )));
    }
    load_checkpoint(dir)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::StageOrder(format!(
            "missing dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    read_dataset(dir)
}

fn finish_run(
    dir: &Path,
    command: &str,
    config_digest: &str,
    seeds: &[u64],
) -> Result<()> {
    let files = list_output_files(dir)?;
    write_run_manifest(dir, command, config_digest, seeds, &files)?;
    Ok(())
}

fn write_stage_log(dir: &Path, report: &StageReport) -> Result<()> {
    std::fs::write(
        dir.join(format!("stage{}.log", report.stage)),
        report.log_lines().as_bytes(),
    )?;
    std::fs::write(
        dir.join(format!("stage{}.json", report.stage)),
        serde_json::to_vec_pretty(report)?,
    )?;
    println!(
        "stage {} done: final loss {:.6}, holdout {:.6}",
        report.stage,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.holdout_loss
    );
    Ok(())
}

fn parse_frame_file(path: &Path, palette_size: usize) -> Result<Frame> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<u8>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .chars()
                .map(|c| {
                    c.to_digit(16)
                        .map(|d| d as u8)
                        .filter(|&d| (d as usize) < palette_size)
                        .ok_or_else(|| {
                            Error::Argument(format!("bad palette digit {c:?} in init frame"))
                        })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Argument("init frame must be a non-empty rectangle".into()));
    }
    let (h, w) = (rows.len(), rows[0].len());
    Ok(Frame { grid: Array2::from_shape_fn((h, w), |(y, x)| rows[y][x]) })
}

fn parse_breaks(spec: &Option<String>) -> Result<Option<Vec<usize>>> {
    match spec {
        None => Ok(None),
        Some(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Argument(format!("bad scene break index {p:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

fn parse_overrides(specs: &[String]) -> Result<Vec<(usize, Vec<String>)>> {
    specs
        .iter()
        .map(|s| {
            let (idx, words) = s.split_once(':').ok_or_else(|| {
                Error::Argument(format!("override {s:?} must be \"CLIP:word word ...\""))
            })?;
            let idx = idx
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("bad override clip index {idx:?}")))?;
            let words: Vec<String> = words.split_whitespace().map(str::to_string).collect();
            if words.is_empty() {
                return Err(Error::Argument(format!("override {s:?} has no words")));
            }
            Ok((idx, words))
        })
        .collect()
}

/// Default initial frame and prompt: the scripted world's own episode start
/// for this seed, so unprompted rollouts stay in-distribution.
fn default_init(cfg: &RunConfig, seed: u64) -> Result<(Frame, Caption)> {
    let ep = simulate_episode(&cfg.pipeline.world, derive_seed(seed, "rollout.init"))?;
    Ok((ep.initial_frame, ep.initial_caption))
}

#[allow(clippy::too_many_arguments)]
fn run_rollout(
    cfg: &RunConfig,
    root: &Path,
    baseline: bool,
    checkpoint: &Option<PathBuf>,
    init_frame: &Option<PathBuf>,
    prompt: &Option<String>,
    clips: Option<usize>,
    scene_breaks: &Option<String>,
    overrides: &[String],
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let ckpt_dir = resolve(root, &cfg.paths.checkpoints, checkpoint);
    let wm = load_prereq_checkpoint(&ckpt_dir)?;
    let needed = if baseline { 1 } else { 4 };
    if wm.stage < needed {
        return Err(Error::StageOrder(format!(
            "checkpoint is at stage {}, but this command needs stage {}",
            wm.stage, needed
        )));
    }
    let (default_frame, default_prompt) = default_init(cfg, seed)?;
    let frame = match init_frame {
        Some(p) => parse_frame_file(p, cfg.pipeline.world.palette_size)?,
        None => default_frame,
    };
    let prompt = match prompt {
        Some(t) => Caption::parse(t)?,
        None => default_prompt,
    };
    let mut rcfg = cfg.rollout.to_rollout_config(seed, parse_overrides(overrides)?);
    if let Some(c) = clips {
        rcfg.clips = c;
    }
    if let Some(b) = parse_breaks(scene_breaks)? {
        rcfg.scene_breaks = b;
    }
    let (name, trace) = if baseline {
        ("rollout-baseline", rollout_lastframe_baseline(&wm, &frame, &prompt, &rcfg)?)
    } else {
        ("rollout", rollout(&wm, &frame, &prompt, &rcfg)?)
    };
    let dir = resolve(root, &cfg.paths.rollouts, out);
    std::fs::create_dir_all(&dir)?;
    export_episode(&wm, &prompt, &trace, &dir)?;
    let dynamics: Vec<String> = trace.dynamics.iter().map(|w| w.join(" ")).collect();
    std::fs::write(dir.join("dynamics.txt"), format!("{}\n", dynamics.join("\n")))?;
    finish_run(&dir, name, &cfg.digest()?, &[seed])?;
    println!("{name}: {} clips -> {}", trace.clips.len(), dir.display());
    Ok(())
}

fn run_eval(
    cfg: &RunConfig,
    episodes_dir: &Path,
    truth_dir: &Path,
    out: &Path,
    mode: &str,
) -> Result<()> {
    let generated = load_data(episodes_dir)?;
    let truth = load_data(truth_dir)?;
    // Score each generated episode against the reference episode at the same
    // index; extra reference episodes are ignored.
    if generated.episodes.len() > truth.episodes.len() {
        return Err(Error::Argument(format!(
            "episode count mismatch: {} generated vs {} reference",
            generated.episodes.len(),
            truth.episodes.len()
        )));
    }
    let palette = palette_colors(generated.config.palette_size);
    let metrics = generated
        .episodes
        .iter()
        .zip(&truth.episodes)
        .map(|(g, t)| evaluate_episode(g, &t.captions, &palette))
        .collect::<Result<Vec<_>>>()?;
    // the report names the configuration that produced the episodes
    let config_digest = match read_run_manifest(episodes_dir) {
        Ok(m) => m.config_digest,
        Err(_) => worldfilm::util::sha256_hex(&std::fs::read(
            episodes_dir.join("manifest.json"),
        )?),
    };
    let seeds = &truth.seeds[..generated.episodes.len()];
    let report = MetricReport::from_episodes(mode, &config_digest, seeds, metrics)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
    finish_run(out, "eval", &cfg.digest()?, seeds)?;
    for (name, stat) in &report.aggregate {
        println!("{name}: {:.6} +- {:.6}", stat.mean, stat.std);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    let root = out_root(&cli.out_root);
    let digest = cfg.digest()?;
    match &cli.cmd {
        Cmd::GenData { out } => {
            let dir = resolve(&root, &cfg.paths.data, out);
            let data = Dataset::generate(
                &cfg.pipeline.world,
                cfg.episodes,
                derive_seed(cfg.pipeline.seed, "dataset"),
            )?;
            write_dataset(&data, &dir)?;
            finish_run(&dir, "gen-data", &digest, &data.seeds)?;
            println!("gen-data: {} episodes -> {}", data.episodes.len(), dir.display());
        }
        Cmd::PretrainDecoder { data, out } => {
            let data = load_data(&resolve(&root, &cfg.paths.data, data))?;
            let mut wm = WorldModel::init(cfg.pipeline.clone())?;
            let report = wm.stage0_pretrain(&data, &cfg.pipeline.stage0)?;
            let dir = resolve(&root, &cfg.paths.checkpoints, out);
            save_checkpoint(&wm, &dir)?;
            write_stage_log(&dir, &report)?;
            finish_run(&dir, "pretrain-decoder", &digest, &[cfg.pipeline.seed])?;
        }
        Cmd::Align { data, checkpoint, out } => {
            run_stage(&cfg, &root, 1, data, checkpoint, out, &digest, "align")?;
        }
        Cmd::Pretrain { data, checkpoint, out } => {
            run_stage(&cfg, &root, 2, data, checkpoint, out, &digest, "pretrain")?;
        }
        Cmd::TrainWm { data, checkpoint, out } => {
            run_stage(&cfg, &root, 3, data, checkpoint, out, &digest, "train-wm")?;
        }
        Cmd::Rollout {
            checkpoint,
            init_frame,
            prompt,
            clips,
            scene_breaks,
            overrides,
            seed,
            out,
        } => {
            run_rollout(
                &cfg,
                &root,
                false,
                checkpoint,
                init_frame,
                prompt,
                *clips,
                scene_breaks,
                overrides,
                *seed,
                out,
            )?;
        }
        Cmd::RolloutBaseline {
            checkpoint,
            init_frame,
            prompt,
            clips,
            scene_breaks,
            seed,
            out,
        } => {
            run_rollout(
                &cfg,
                &root,
                true,
                checkpoint,
                init_frame,
                prompt,
                *clips,
                scene_breaks,
                &[],
                *seed,
                out,
            )?;
        }
        Cmd::Eval { episodes, truth, out, mode } => {
            run_eval(&cfg, episodes, truth, out, mode)?;
        }
        Cmd::Report { metrics, out } => {
            let reports = metrics
                .iter()
                .map(|p| -> Result<MetricReport> {
                    let bytes = std::fs::read(p)?;
                    Ok(serde_json::from_slice(&bytes)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let files = emit_report(&reports, out)?;
            let seeds: Vec<u64> = reports.iter().flat_map(|r| r.seeds.clone()).collect();
            finish_run(out, "report", &digest, &seeds)?;
            println!("report: {} files -> {}", files.len(), out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    cfg: &RunConfig,
    root: &Path,
    stage: u8,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    out: &Option<PathBuf>,
    digest: &str,
    command: &str,
) -> Result<()> {
    let data = load_data(&resolve(root, &cfg.paths.data, data))?;
    let ckpt_dir = resolve(root, &cfg.paths.checkpoints, checkpoint);
    let mut wm = load_prereq_checkpoint(&ckpt_dir)?;
    let stage_cfg = match stage {
        1 => &cfg.pipeline.stage1,
        2 => &cfg.pipeline.stage2,
        _ => &cfg.pipeline.stage3,
    };
    let report = match stage {
        1 => wm.stage1_align(&data, stage_cfg)?,
        2 => wm.stage2_generative(&data, stage_cfg)?,
        _ => wm.stage3_worldmodel(&data, stage_cfg)?,
    };
    let dir = resolve(root, &cfg.paths.checkpoints, out);
    save_checkpoint(&wm, &dir)?;
    write_stage_log(&dir, &report)?;
    finish_run(&dir, command, digest, &[cfg.pipeline.seed])?;
    Ok(())
}
