//! Run configuration: built-in defaults, overlaid by a JSON file, then the
//! environment, then command-line flags.

use std::path::{Path, PathBuf};

use gazeward_core::cues::{CueMode, CueProviderConfig};
use gazeward_core::data::SyntheticSpec;
use gazeward_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::remote::EMBED_URL_ENV;

pub const SEED_ENV: &str = "OMNIGAZE_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Directory with `labeled.jsonl`, `unlabeled.jsonl` and the oracle.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub cues: CueProviderConfig,
    pub data: DataPaths,
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f32>,
    pub teacher_epochs: Option<u32>,
    pub ssl_epochs: Option<u32>,
    pub batch_size: Option<usize>,
    pub embed_url: Option<String>,
    pub cue_mode: Option<CueMode>,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> AppResult<Self> {
        serde_json::from_str(text).map_err(|e| AppError::config(e.to_string()))
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_json(&text).map_err(|e| AppError::config(format!("{}: {e}", path.display())))
    }

    /// File (or defaults), then environment, then flags; validated.
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> AppResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::read(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.apply_flags(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> AppResult<()> {
        if let Some(v) = get(SEED_ENV).filter(|v| !v.trim().is_empty()) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| AppError::config(format!("{SEED_ENV}={v} is not a u64")))?;
        }
        if let Some(v) = get(EMBED_URL_ENV).filter(|v| !v.trim().is_empty()) {
            self.cues.endpoint = Some(v);
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, f: &Overrides) {
        if let Some(s) = f.seed {
            self.train.seed = s;
        }
        if let Some(t) = f.tau {
            self.train.tau = t;
        }
        if let Some(e) = f.teacher_epochs {
            self.train.teacher_epochs = e;
        }
        if let Some(e) = f.ssl_epochs {
            self.train.ssl_epochs = e;
        }
        if let Some(b) = f.batch_size {
            self.train.batch_size = b;
        }
        if let Some(u) = &f.embed_url {
            self.cues.endpoint = Some(u.clone());
        }
        if let Some(m) = f.cue_mode {
            self.cues.mode = m;
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        let tag = |section: &str, e: gazeward_core::Error| AppError::config(format!("{section}: {e}"));
        self.train.validate().map_err(|e| tag("train", e))?;
        self.synthetic.validate().map_err(|e| tag("synthetic", e))?;
        self.cues.validate().map_err(|e| tag("cues", e))
    }
}
