//! The run configuration: one JSON document with `schedule`, `net`, `train`,
//! `sample` and `paths` blocks. Relative paths resolve against the directory
//! of the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadiff::denoiser::DenoiserConfig;
use cadiff::engine::{SampleConfig, TrainConfig};
use cadiff::kernels::ScheduleConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub net: DenoiserConfig,
    #[serde(default)]
    pub train: Option<TrainBlock>,
    #[serde(default)]
    pub sample: Option<SampleConfig>,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBlock {
    /// Training sequences, native JSON or row format.
    pub corpus: PathBuf,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Final checkpoint; periodic ones get an `-<iter>` suffix.
    pub checkpoint: PathBuf,
    /// Newline-delimited JSON training log.
    pub log: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            checkpoint: "checkpoint.json".into(),
            log: "train_log.jsonl".into(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(tb) = cfg.train.as_mut() {
            resolve(base, &mut tb.corpus);
            if !tb.corpus.exists() {
                bail!("corpus file {} does not exist", tb.corpus.display());
            }
        }
        resolve(base, &mut cfg.paths.checkpoint);
        resolve(base, &mut cfg.paths.log);
        cfg.schedule.check().context("invalid schedule block")?;
        cfg.net.check().context("invalid net block")?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"corpus": "c.json", "seed": 3}}"#).unwrap();
        let tb = cfg.train.unwrap();
        assert_eq!(tb.config.seed, 3);
        assert_eq!(tb.config.batch_size, 64);
        assert_eq!(cfg.schedule.steps, 100);
        assert_eq!(cfg.paths.log, PathBuf::from("train_log.jsonl"));
    }

    #[test]
    fn seed_is_mandatory() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"corpus": "c.json"}}"#);
        assert!(err.unwrap_err().to_string().contains("seed"));
        let err = serde_json::from_str::<RunConfig>(r#"{"sample": {"n": 3}}"#);
        assert!(err.unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn unknown_blocks_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"optimizer": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"schedule": {"steps": 4}}"#).is_err());
    }
}
