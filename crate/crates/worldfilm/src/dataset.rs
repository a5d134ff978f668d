//! On-disk dataset format: a manifest with config, seeds and content digests,
//! one flat u8 frames file and one line-delimited records file per episode.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{segment_video, simulate_episode, Caption, Episode, Frame, WorldConfig};
use crate::util::sha256_hex;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub kind: String,
    pub config: WorldConfig,
    pub seeds: Vec<u64>,
    pub episode_count: usize,
    pub files: Vec<EpisodeFiles>,
    /// Digest over all per-file digests, in order.
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeFiles {
    pub frames: String,
    pub records: String,
    pub frames_digest: String,
    pub records_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seeds: Vec<u64>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Simulate `count` episodes with per-episode seeds `base_seed + i`.
    pub fn generate(config: &WorldConfig, count: usize, base_seed: u64) -> Result<Self> {
        let seeds: Vec<u64> = (0..count as u64).map(|i| base_seed.wrapping_add(i)).collect();
        let episodes = seeds
            .iter()
            .map(|&s| simulate_episode(config, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { config: config.clone(), seeds, episodes })
    }
}

fn frames_bytes(episode: &Episode) -> Vec<u8> {
    let mut out = Vec::new();
    for clip in &episode.clips {
        for frame in &clip.frames {
            out.extend(frame.grid.iter().copied());
        }
    }
    out
}

fn records_text(episode: &Episode) -> String {
    let mut out = String::new();
    out.push_str(&format!("init\t{}\n", episode.initial_caption.text()));
    for (i, clip) in episode.clips.iter().enumerate() {
        out.push_str(&format!(
            "clip\t{}\t{}\t{}\t{}\n",
            i,
            clip.scene_id,
            if episode.scene_breaks[i] { 1 } else { 0 },
            episode.captions[i].text()
        ));
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(path)?;
    let mut files = Vec::new();
    for (i, ep) in dataset.episodes.iter().enumerate() {
        let fname = format!("ep_{i:05}.frames");
        let rname = format!("ep_{i:05}.records");
        let fbytes = frames_bytes(ep);
        let rtext = records_text(ep);
        fs::write(path.join(&fname), &fbytes)?;
        fs::write(path.join(&rname), rtext.as_bytes())?;
        files.push(EpisodeFiles {
            frames: fname,
            records: rname,
            frames_digest: sha256_hex(&fbytes),
            records_digest: sha256_hex(rtext.as_bytes()),
        });
    }
    let combined: String =
        files.iter().flat_map(|f| [f.frames_digest.as_str(), f.records_digest.as_str()]).collect();
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        kind: "worldfilm-dataset".into(),
        config: dataset.config.clone(),
        seeds: dataset.seeds.clone(),
        episode_count: dataset.episodes.len(),
        files,
        digest: sha256_hex(combined.as_bytes()),
    };
    fs::write(path.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn parse_episode(config: &WorldConfig, fbytes: &[u8], rtext: &str) -> Result<Episode> {
    let f = config.frames_per_clip;
    let (h, w) = (config.height, config.width);
    let frame_len = h * w;
    if fbytes.len() % (frame_len * f) != 0 || fbytes.is_empty() {
        return Err(Error::Corruption("frames file has unexpected length".into()));
    }
    let n_frames = fbytes.len() / frame_len;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let chunk = &fbytes[i * frame_len..(i + 1) * frame_len];
        if chunk.iter().any(|&b| b as usize >= config.palette_size) {
            return Err(Error::Corruption("palette index out of range".into()));
        }
        frames.push(Frame {
            grid: ndarray::Array2::from_shape_vec((h, w), chunk.to_vec())
                .map_err(|e| Error::Corruption(e.to_string()))?,
        });
    }
    let mut clips = segment_video(&frames, f)?;

    let mut initial_caption = None;
    let mut captions = Vec::new();
    let mut scene_breaks = Vec::new();
    for line in rtext.lines() {
        let parts: Vec<&str> = line.split('\t').collect();
        match parts.as_slice() {
            ["init", caption] => initial_caption = Some(Caption::parse(caption)?),
            ["clip", idx, scene, brk, caption] => {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::Corruption("bad clip index".into()))?;
                if i != captions.len() {
                    return Err(Error::Corruption("clip records out of order".into()));
                }
                let scene: usize =
                    scene.parse().map_err(|_| Error::Corruption("bad scene id".into()))?;
                if i < clips.len() {
                    clips[i].scene_id = scene;
                    clips[i].clip_index = i;
                }
                scene_breaks.push(*brk == "1");
                captions.push(Caption::parse(caption)?);
            }
            _ => return Err(Error::Corruption(format!("bad record line: {line}"))),
        }
    }
    if captions.len() != clips.len() {
        return Err(Error::Corruption("record count does not match clip count".into()));
    }
    let episode = Episode {
        initial_frame: clips[0].frames[0].clone(),
        initial_caption: initial_caption
            .ok_or_else(|| Error::Corruption("missing init record".into()))?,
        clips,
        captions,
        scene_breaks,
    };
    episode.validate().map_err(|e| Error::Corruption(e.to_string()))?;
    Ok(episode)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(path.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION || manifest.kind != "worldfilm-dataset" {
        return Err(Error::Corruption("unrecognized dataset manifest".into()));
    }
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    let mut episodes = Vec::with_capacity(manifest.episode_count);
    for files in &manifest.files {
        let fbytes = fs::read(path.join(&files.frames))?;
        if sha256_hex(&fbytes) != files.frames_digest {
            return Err(Error::Corruption(format!("digest mismatch in {}", files.frames)));
        }
        let rbytes = fs::read(path.join(&files.records))?;
        if sha256_hex(&rbytes) != files.records_digest {
            return Err(Error::Corruption(format!("digest mismatch in {}", files.records)));
        }
        let rtext = String::from_utf8(rbytes)
            .map_err(|_| Error::Corruption("records not utf-8".into()))?;
        episodes.push(parse_episode(&manifest.config, &fbytes, &rtext)?);
    }
    if episodes.len() != manifest.episode_count {
        return Err(Error::Corruption("episode count mismatch".into()));
    }
    Ok(Dataset { config: manifest.config, seeds: manifest.seeds, episodes })
}
