//! Toy video-quality metrics and dynamics-accuracy scoring over episodes,
//! with deterministic report and plot emission.
//!
//! Background is palette index 0 by convention; all other indices are
//! foreground. Color-distance metrics take the palette table, so relabeling
//! indices together with the table leaves every metric unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Caption, Episode, Frame};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const METRIC_NAMES: [&str; 6] = [
    "subject_consistency",
    "background_consistency",
    "temporal_flickering",
    "motion_smoothness",
    "dynamic_degree",
    "dynamics_accuracy",
];

/// All frames of an episode in temporal order.
pub fn episode_frames(ep: &Episode) -> Vec<&Frame> {
    ep.all_frames().collect()
}

fn foreground_histogram(frame: &Frame) -> Vec<f64> {
    let mut counts: BTreeMap<u8, f64> = BTreeMap::new();
    for &p in frame.grid.iter() {
        if p != 0 {
            *counts.entry(p).or_insert(0.0) += 1.0;
        }
    }
    let total: f64 = counts.values().sum();
    let mut h = vec![0.0; 256];
    if total > 0.0 {
        for (k, v) in counts {
            h[k as usize] = v / total;
        }
    }
    h
}

/// Mean pairwise histogram intersection of foreground colors over all frame
/// pairs. Pairs of empty-foreground frames score 1.0 (vacuous); a pair with
/// exactly one empty frame scores 0.0. Fewer than two frames → 1.0.
pub fn subject_consistency(frames: &[&Frame]) -> f64 {
    if frames.len() < 2 {
        return 1.0;
    }
    let hists: Vec<Vec<f64>> = frames.iter().map(|f| foreground_histogram(f)).collect();
    let empty: Vec<bool> = hists.iter().map(|h| h.iter().all(|&v| v == 0.0)).collect();
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            acc += if empty[i] && empty[j] {
                1.0
            } else {
                hists[i].iter().zip(&hists[j]).map(|(a, b)| a.min(*b)).sum()
            };
            n += 1;
        }
    }
    acc / n as f64
}

/// Mean rate at which background cells stay background across consecutive
/// frames. Pairs without background cells score 1.0.
pub fn background_consistency(frames: &[&Frame]) -> f64 {
    if frames.len() < 2 {
        return 1.0;
    }
    let mut acc = 0.0;
    for w in frames.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut bg = 0usize;
        let mut kept = 0usize;
        for (x, y) in a.grid.iter().zip(b.grid.iter()) {
            if *x == 0 {
                bg += 1;
                if *y == 0 {
                    kept += 1;
                }
            }
        }
        acc += if bg == 0 { 1.0 } else { kept as f64 / bg as f64 };
    }
    acc / (frames.len() - 1) as f64
}

fn color_dist(palette: &[[f64; 3]], a: u8, b: u8) -> f64 {
    let (ca, cb) = (palette[a as usize], palette[b as usize]);
    (0..3).map(|k| (ca[k] - cb[k]).powi(2)).sum::<f64>().sqrt()
}

/// 1 minus the mean normalized color change on static cells: a cell is static
/// in a frame triple when its endpoints agree, and the change is the distance
/// of the middle frame from them, normalized by the largest palette gap.
/// Detects A-B-A flicker; fewer than three frames → 1.0.
pub fn temporal_flickering(frames: &[&Frame], palette: &[[f64; 3]]) -> f64 {
    if frames.len() < 3 {
        return 1.0;
    }
    let max_gap = crate::diffusion::max_palette_gap(palette);
    let mut acc = 0.0;
    let mut n = 0usize;
    for w in frames.windows(3) {
        for ((a, b), c) in w[0].grid.iter().zip(w[1].grid.iter()).zip(w[2].grid.iter()) {
            if a == c {
                acc += color_dist(palette, *b, *a) / max_gap;
                n += 1;
            }
        }
    }
    if n == 0 {
        return 1.0;
    }
    1.0 - acc / n as f64
}

fn foreground_centroid(frame: &Frame) -> Option<(f64, f64)> {
    let mut sy = 0.0;
    let mut sx = 0.0;
    let mut n = 0.0;
    for ((y, x), &p) in frame.grid.indexed_iter() {
        if p != 0 {
            sy += y as f64;
            sx += x as f64;
            n += 1.0;
        }
    }
    if n == 0.0 {
        None
    } else {
        Some((sy / n, sx / n))
    }
}

/// 1 minus the normalized mean second temporal difference of the foreground
/// centroid. Constant-velocity motion scores exactly 1.0. Triples missing a
/// centroid are skipped; with no usable triple the metric is 1.0.
pub fn motion_smoothness(frames: &[&Frame]) -> f64 {
    if frames.is_empty() {
        return 1.0;
    }
    let (h, w) = (frames[0].height() as f64, frames[0].width() as f64);
    let norm = 2.0 * ((h - 1.0).powi(2) + (w - 1.0).powi(2)).sqrt();
    let cents: Vec<Option<(f64, f64)>> = frames.iter().map(|f| foreground_centroid(f)).collect();
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 1..cents.len().saturating_sub(1) {
        if let (Some(a), Some(b), Some(c)) = (cents[t - 1], cents[t], cents[t + 1]) {
            let dy = c.0 - 2.0 * b.0 + a.0;
            let dx = c.1 - 2.0 * b.1 + a.1;
            acc += (dy * dy + dx * dx).sqrt() / norm;
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    1.0 - acc / n as f64
}

/// Mean color change between consecutive frames, normalized by the largest
/// palette gap, so alternating between background and the farthest color
/// scores the maximum 1.0. Single-frame input → 0.0.
pub fn dynamic_degree(frames: &[&Frame], palette: &[[f64; 3]]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let max_gap = crate::diffusion::max_palette_gap(palette);
    let mut acc = 0.0;
    let mut n = 0usize;
    for w in frames.windows(2) {
        for (a, b) in w[0].grid.iter().zip(w[1].grid.iter()) {
            acc += color_dist(palette, *a, *b) / max_gap;
            n += 1;
        }
    }
    acc / n as f64
}

/// Position-wise exact-match rate of two word sequences; a length mismatch is
/// scored against the longer sequence. Symmetric in its arguments.
pub fn dynamics_accuracy(a: &[String], b: &[String]) -> f64 {
    let longer = a.len().max(b.len());
    if longer == 0 {
        return 1.0;
    }
    let hits = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
    hits as f64 / longer as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub subject_consistency: f64,
    pub background_consistency: f64,
    pub temporal_flickering: f64,
    pub motion_smoothness: f64,
    pub dynamic_degree: f64,
    pub dynamics_accuracy: f64,
}

impl EpisodeMetrics {
    pub fn get(&self, name: &str) -> f64 {
        match name {
            "subject_consistency" => self.subject_consistency,
            "background_consistency" => self.background_consistency,
            "temporal_flickering" => self.temporal_flickering,
            "motion_smoothness" => self.motion_smoothness,
            "dynamic_degree" => self.dynamic_degree,
            "dynamics_accuracy" => self.dynamics_accuracy,
            _ => f64::NAN,
        }
    }
}

/// Score one episode's video against reference captions.
pub fn evaluate_episode(
    ep: &Episode,
    truth_captions: &[Caption],
    palette: &[[f64; 3]],
) -> Result<EpisodeMetrics> {
    if truth_captions.len() != ep.captions.len() {
        return Err(Error::Argument(format!(
            "caption count mismatch: {} vs {}",
            ep.captions.len(),
            truth_captions.len()
        )));
    }
    let frames = episode_frames(ep);
    if frames.is_empty() {
        return Err(Error::EmptyResult("episode has no frames".into()));
    }
    let dyn_acc = ep
        .captions
        .iter()
        .zip(truth_captions)
        .map(|(p, t)| dynamics_accuracy(&p.words, &t.words))
        .sum::<f64>()
        / ep.captions.len() as f64;
    Ok(EpisodeMetrics {
        subject_consistency: subject_consistency(&frames),
        background_consistency: background_consistency(&frames),
        temporal_flickering: temporal_flickering(&frames, palette),
        motion_smoothness: motion_smoothness(&frames),
        dynamic_degree: dynamic_degree(&frames, palette),
        dynamics_accuracy: dyn_acc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    /// Conditioning mode this report describes (e.g. "worldmodel", "baseline").
    pub mode: String,
    /// Digest of the configuration / checkpoint that produced the episodes.
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub per_episode: Vec<EpisodeMetrics>,
    pub aggregate: BTreeMap<String, MetricStat>,
}

impl MetricReport {
    pub fn from_episodes(
        mode: &str,
        config_digest: &str,
        seeds: &[u64],
        per_episode: Vec<EpisodeMetrics>,
    ) -> Result<Self> {
        if per_episode.is_empty() {
            return Err(Error::EmptyResult("no episodes to report".into()));
        }
        let mut aggregate = BTreeMap::new();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = per_episode.iter().map(|m| m.get(name)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            aggregate.insert(name.to_string(), MetricStat { mean, std: var.sqrt() });
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: mode.to_string(),
            config_digest: config_digest.to_string(),
            seeds: seeds.to_vec(),
            per_episode,
            aggregate,
        })
    }
}

/// A minimal deterministic SVG: per-episode polyline plus the mean bar.
fn svg_plot(title: &str, values: &[f64], mean: f64) -> String {
    let (w, h) = (420.0, 240.0);
    let (ml, mr, mt, mb) = (40.0, 10.0, 24.0, 20.0);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(mean).min(0.0);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(mean).max(1.0);
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    let sx = |i: usize| {
        if values.len() <= 1 {
            ml
        } else {
            ml + (w - ml - mr) * i as f64 / (values.len() - 1) as f64
        }
    };
    let sy = |v: f64| h - mb - (h - mt - mb) * (v - lo) / span;
    let pts: Vec<String> =
        values.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v))).collect();
    let my = sy(mean);
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"8\" y=\"16\" font-size=\"12\" font-family=\"monospace\">{title}</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "<line x1=\"{ml}\" y1=\"{my:.2}\" x2=\"{xr}\" y2=\"{my:.2}\" stroke=\"crimson\" ",
            "stroke-dasharray=\"4 3\"/>\n",
            "<text x=\"8\" y=\"{h2}\" font-size=\"10\" font-family=\"monospace\">mean {mean:.6}</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        title = title,
        pts = pts.join(" "),
        ml = ml,
        my = my,
        xr = w - mr,
        h2 = h - 6.0,
        mean = mean,
    )
}

/// Write `report.json`, a text summary and one plot per metric x mode.
/// Returns the sorted list of files written; identical inputs produce
/// byte-identical outputs.
pub fn emit_report(reports: &[MetricReport], out_dir: &Path) -> Result<Vec<String>> {
    if reports.is_empty() {
        return Err(Error::EmptyResult("nothing to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(&reports)?)?;
    files.push("report.json".to_string());

    let mut summary = String::new();
    summary.push_str(&format!("worldfilm metric report v{REPORT_SCHEMA_VERSION}\n"));
    for r in reports {
        summary.push_str(&format!(
            "mode={} episodes={} config_digest={} seeds={:?}\n",
            r.mode,
            r.per_episode.len(),
            r.config_digest,
            r.seeds
        ));
        for name in METRIC_NAMES {
            let s = &r.aggregate[name];
            summary.push_str(&format!("  {name}: {:.6} +- {:.6}\n", s.mean, s.std));
        }
    }
    fs::write(out_dir.join("summary.txt"), summary.as_bytes())?;
    files.push("summary.txt".to_string());

    for r in reports {
        for name in METRIC_NAMES {
            let values: Vec<f64> = r.per_episode.iter().map(|m| m.get(name)).collect();
            let svg = svg_plot(&format!("{name} [{}]", r.mode), &values, r.aggregate[name].mean);
            let fname = format!("plot_{}_{}.svg", name, r.mode);
            fs::write(out_dir.join(&fname), svg.as_bytes())?;
            files.push(fname);
        }
    }
    files.sort();
    Ok(files)
}

/// First-order word-bigram predictor over caption streams, the comparison
/// baseline for dynamics anticipation. Captions are joined by a separator
/// token; prediction continues greedily from the previous caption's last word.
#[derive(Debug, Clone, Default)]
pub struct BigramModel {
    counts: BTreeMap<String, BTreeMap<String, usize>>,
}

pub const BIGRAM_SEP: &str = "<sep>";

impl BigramModel {
    pub fn train(episodes: &[Episode]) -> Self {
        let mut m = BigramModel::default();
        for ep in episodes {
            let mut stream: Vec<&str> = vec![BIGRAM_SEP];
            for cap in std::iter::once(&ep.initial_caption).chain(ep.captions.iter()) {
                stream.extend(cap.words.iter().map(|w| w.as_str()));
                stream.push(BIGRAM_SEP);
            }
            for w in stream.windows(2) {
                *m.counts
                    .entry(w[0].to_string())
                    .or_default()
                    .entry(w[1].to_string())
                    .or_insert(0) += 1;
            }
        }
        m
    }

    fn most_likely_after(&self, word: &str) -> Option<&str> {
        // ties break toward the lexicographically first word (BTreeMap order)
        self.counts.get(word).and_then(|m| {
            m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(w, _)| w.as_str())
        })
    }

    /// Greedy prediction of the next caption given the previous one. In a
    /// bigram model the only usable context across the caption boundary is
    /// the separator itself, so generation restarts from it.
    pub fn predict_next(&self, _prev: &[String], max_words: usize) -> Vec<String> {
        let mut cur = BIGRAM_SEP.to_string();
        let mut out = Vec::new();
        while out.len() < max_words {
            match self.most_likely_after(&cur) {
                Some(BIGRAM_SEP) | None => break,
                Some(w) => {
                    out.push(w.to_string());
                    cur = w.to_string();
                }
            }
        }
        out
    }
}
