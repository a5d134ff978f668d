//! Run configuration and run bookkeeping for the command-line entry point.
//!
//! One structured-text (TOML) file with an explicit schema version drives
//! every subcommand; unknown keys are rejected. Every run directory receives
//! a manifest naming the producing command, the config digest, the seeds and
//! a content digest over the produced files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::RolloutConfig;
use crate::train::PipelineConfig;
use crate::util::sha256_hex;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Rollout defaults; the per-run seed and control overrides come from flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub clips: usize,
    /// Clip indices that start a new scene (never 0).
    pub scene_breaks: Vec<usize>,
    /// 0.0 = greedy dynamics decoding.
    pub temperature: f64,
    /// Ancestral sampling steps for the diffusion decoder.
    pub sample_steps: usize,
    pub guidance: f64,
    pub max_words: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            clips: 6,
            scene_breaks: vec![2, 4],
            temperature: 0.0,
            sample_steps: 40,
            guidance: 2.0,
            max_words: 7,
        }
    }
}

impl RolloutSection {
    pub fn to_rollout_config(
        &self,
        seed: u64,
        overrides: Vec<(usize, Vec<String>)>,
    ) -> RolloutConfig {
        RolloutConfig {
            clips: self.clips,
            scene_breaks: self.scene_breaks.clone(),
            overrides,
            temperature: self.temperature,
            sample_steps: self.sample_steps,
            guidance: self.guidance,
            max_words: self.max_words,
            seed,
        }
    }
}

/// Artifact directories, relative to the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: String,
    pub checkpoints: String,
    pub rollouts: String,
    pub reports: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            rollouts: "rollouts".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Number of scripted episodes to generate for training.
    pub episodes: usize,
    pub pipeline: PipelineConfig,
    pub rollout: RolloutSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            episodes: 120,
            pipeline: PipelineConfig::desk_default(),
            rollout: RolloutSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.episodes < 2 {
            return Err(Error::Config("episodes: need at least 2 (one is held out)".into()));
        }
        self.pipeline.validate()?;
        let r = &self.rollout;
        if r.clips == 0 {
            return Err(Error::Config("rollout.clips: must be >= 1".into()));
        }
        if r.scene_breaks.iter().any(|&b| b == 0 || b >= r.clips) {
            return Err(Error::Config(
                "rollout.scene_breaks: entries must lie in 1..clips".into(),
            ));
        }
        if r.sample_steps == 0 || r.sample_steps > self.pipeline.schedule.steps {
            return Err(Error::Config(format!(
                "rollout.sample_steps: must be in 1..={}",
                self.pipeline.schedule.steps
            )));
        }
        if r.max_words == 0 || r.max_words + 1 > self.pipeline.textenc.max_len {
            return Err(Error::Config(
                "rollout.max_words: must be >= 1 and fit the text encoder".into(),
            ));
        }
        if !(0.0..=10.0).contains(&r.temperature) {
            return Err(Error::Config("rollout.temperature: must be in [0, 10]".into()));
        }
        Ok(())
    }

    /// Digest of the canonical JSON serialization.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Parse and validate a TOML run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Self-describing record written into every artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    /// Relative file name -> sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    /// Digest over the sorted output digests.
    pub content_digest: String,
}

pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Hash the given files under `dir` and write `run.json` next to them.
pub fn write_run_manifest(
    dir: &Path,
    command: &str,
    config_digest: &str,
    seeds: &[u64],
    files: &[String],
) -> Result<RunManifest> {
    let mut outputs = BTreeMap::new();
    for f in files {
        let bytes = fs::read(dir.join(f))?;
        outputs.insert(f.clone(), sha256_hex(&bytes));
    }
    let mut acc = Vec::new();
    for (name, digest) in &outputs {
        acc.extend_from_slice(name.as_bytes());
        acc.push(0);
        acc.extend_from_slice(digest.as_bytes());
        acc.push(b'\n');
    }
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: command.to_string(),
        config_digest: config_digest.to_string(),
        seeds: seeds.to_vec(),
        outputs,
        content_digest: sha256_hex(&acc),
    };
    fs::write(dir.join(RUN_MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let bytes = fs::read(dir.join(RUN_MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// List every regular file under `dir` (relative paths, sorted), skipping the
/// run manifest itself.
pub fn list_output_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .map_err(|e| Error::Index(e.to_string()))?
                    .to_string_lossy()
                    .into_owned();
                if rel != RUN_MANIFEST_FILE {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}
