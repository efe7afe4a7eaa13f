//! TOML run configuration. Every field has a default, and command-line flags
//! override whatever the file says.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::DEFAULT_TEMPLATE;
use crate::detect::{
    default_heads, DetectorParams, HeadSpec, DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH,
};
use crate::infer::Precision;
use crate::perf::{DEFAULT_FRAMES, DEFAULT_WARMUP};
use crate::recognize::DEFAULT_VERIFY_THRESHOLD;
use crate::tensor::DEFAULT_LETTERBOX_FILL;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub model_path: PathBuf,
    pub input_size: usize,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub heads: Vec<HeadSpec>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            model_path: PathBuf::from("models/detector.ftm"),
            input_size: 640,
            conf_thresh: DEFAULT_CONF_THRESH,
            iou_thresh: DEFAULT_IOU_THRESH,
            heads: default_heads(),
        }
    }
}

impl DetectorConfig {
    pub fn params(&self) -> DetectorParams {
        DetectorParams {
            conf_thresh: self.conf_thresh,
            iou_thresh: self.iou_thresh,
            heads: self.heads.clone(),
            fill: DEFAULT_LETTERBOX_FILL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub model_path: PathBuf,
    pub embedding_dim: usize,
    pub precision: Precision,
    pub align: bool,
    pub template: Vec<[f64; 2]>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            model_path: PathBuf::from("models/embedder.ftm"),
            embedding_dim: 128,
            precision: Precision::F32,
            align: true,
            template: DEFAULT_TEMPLATE.to_vec(),
        }
    }
}

impl EmbedderConfig {
    pub fn template(&self) -> [[f64; 2]; 5] {
        self.template
            .as_slice()
            .try_into()
            .expect("validated to 5 points")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub threshold: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_VERIFY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub frames: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            frames: DEFAULT_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub detector: DetectorConfig,
    pub embedder: EmbedderConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
}

fn open_unit(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!(
            "{name} = {v} must lie in (0, 1)"
        )))
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        // relative model paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.detector.model_path, &mut cfg.embedder.model_path] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.detector;
        if d.input_size == 0 || !d.input_size.is_multiple_of(32) {
            return Err(ConfigError::Invalid(format!(
                "detector.input_size = {} must be a positive multiple of 32",
                d.input_size
            )));
        }
        open_unit("detector.conf_thresh", d.conf_thresh)?;
        open_unit("detector.iou_thresh", d.iou_thresh)?;
        if d.heads.is_empty()
            || d.heads
                .iter()
                .any(|h| h.stride == 0 || h.anchors.is_empty())
        {
            return Err(ConfigError::Invalid(
                "every detector head needs a stride and anchors".into(),
            ));
        }
        if d.heads
            .iter()
            .flat_map(|h| &h.anchors)
            .any(|&(w, h)| !(w > 0.0 && h > 0.0))
        {
            return Err(ConfigError::Invalid("anchor sizes must be positive".into()));
        }
        let e = &self.embedder;
        if e.embedding_dim == 0 {
            return Err(ConfigError::Invalid(
                "embedder.embedding_dim must be positive".into(),
            ));
        }
        if e.template.len() != 5 {
            return Err(ConfigError::Invalid(format!(
                "embedder.template has {} points, expected 5",
                e.template.len()
            )));
        }
        open_unit("verify.threshold", self.verify.threshold)?;
        if self.bench.frames == 0 {
            return Err(ConfigError::Invalid(
                "bench.frames must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
