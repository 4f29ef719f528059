//! Run configuration: one JSON document with `model`, `train`, `data`, and
//! `modality` sections. Every section has defaults and rejects unknown keys;
//! errors name the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cognitive::DecoderConfig;
use crate::encoders::ModalityConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Caption JSONL consumed by `dataset-build`.
    pub captions_path: Option<PathBuf>,
    /// Instruction JSONL used for training.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    /// Directory media paths are resolved against.
    pub media_root: Option<PathBuf>,
    /// Examples drawn from each source after generation; `None` keeps all.
    pub mix_per_source: Option<usize>,
    pub seed: u64,
    /// Concurrent generation requests.
    pub concurrency: usize,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            captions_path: None,
            train_path: None,
            eval_path: None,
            media_root: None,
            mix_per_source: None,
            seed: 0,
            concurrency: 4,
            max_tokens: 2048,
            temperature: 0.7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub modality: ModalityConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.modality.validate()?;
        if self.train.max_seq_len > self.model.max_seq_len {
            return Err(Error::config(
                "train.max_seq_len",
                format!("exceeds model.max_seq_len ({})", self.model.max_seq_len),
            ));
        }
        if self.data.concurrency == 0 {
            return Err(Error::config("data.concurrency", "must be positive"));
        }
        if self.data.mix_per_source == Some(0) {
            return Err(Error::config("data.mix_per_source", "must be positive"));
        }
        Ok(())
    }

    /// Routes one seed to every random choice in a run.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

impl DataConfig {
    fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.captions_path,
            &mut self.train_path,
            &mut self.eval_path,
            &mut self.media_root,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}
