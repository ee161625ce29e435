//! Run configuration: one JSON document for every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::CascadeConfig;
use crate::crossdetect::CrossingDetectorConfig;
use crate::ingest::SegmentationParams;
use crate::postproc::CrossingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Schema violation; `key` is the dotted path of the offending entry
    /// (`.` for the top level).
    #[error("config error at `{key}`: {message}")]
    Schema { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub n_individuals: usize,
    /// PGM directory, raw `FTRK` file or blob stream. Relative paths are
    /// resolved against the config file's directory.
    pub input: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Root of every random stream (crossing detector and identification
    /// training). Overrides the `seed` fields of the nested train configs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub segmentation: SegmentationParams,
    #[serde(default)]
    pub crossing_detector: CrossingDetectorConfig,
    #[serde(default)]
    pub cascade: CascadeConfig,
    #[serde(default)]
    pub crossings: CrossingConfig,
    /// Side of identification images; estimated from the body length when
    /// absent.
    #[serde(default)]
    pub identification_image_side: Option<usize>,
    /// Residual identities with `max P2` at least this are treated as fixed
    /// by the speed correction.
    #[serde(default = "default_fixed_p2")]
    pub fixed_p2_threshold: f64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("fragtrack_out")
}

fn default_fixed_p2() -> f64 {
    0.9
}

impl TrackConfig {
    pub fn new(n_individuals: usize, input: impl Into<PathBuf>) -> Self {
        Self {
            n_individuals,
            input: input.into(),
            output_dir: default_output_dir(),
            seed: 0,
            segmentation: SegmentationParams::default(),
            crossing_detector: CrossingDetectorConfig::default(),
            cascade: CascadeConfig::default(),
            crossings: CrossingConfig::default(),
            identification_image_side: None,
            fixed_p2_threshold: default_fixed_p2(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ConfigError::Schema {
                key,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative `input` and
    /// `output_dir` are made relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.input.is_relative() {
            cfg.input = base.join(&cfg.input);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: String| {
            Err(ConfigError::Schema {
                key: key.into(),
                message,
            })
        };
        if self.n_individuals < 2 {
            return bad("n_individuals", format!("need at least 2 individuals, got {}", self.n_individuals));
        }
        if let Err(e) = self.segmentation.validate() {
            return bad("segmentation", e.to_string());
        }
        let c = &self.cascade;
        for (key, v) in [
            ("cascade.train_fraction", c.train_fraction),
            ("cascade.protocol1_coverage", c.protocol1_coverage),
            ("cascade.protocol2_coverage", c.protocol2_coverage),
            ("cascade.accumulation_target", c.accumulation_target),
            ("cascade.partial_accumulation_threshold", c.partial_accumulation_threshold),
            ("cascade.pretrain_coverage", c.pretrain_coverage),
            ("crossing_detector.train_fraction", self.crossing_detector.train_fraction),
            ("fixed_p2_threshold", self.fixed_p2_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("{v} is outside [0, 1]"));
            }
        }
        for (key, v) in [
            ("cascade.train.batch_size", c.train.batch_size),
            ("cascade.max_images_per_identity", c.max_images_per_identity),
            ("cascade.hidden", c.hidden),
            ("crossing_detector.train.batch_size", self.crossing_detector.train.batch_size),
            ("crossing_detector.hidden", self.crossing_detector.hidden),
        ] {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        if self.identification_image_side == Some(0) {
            return bad("identification_image_side", "must be positive".into());
        }
        Ok(())
    }

    /// Nested configs with the run seed applied.
    pub fn seeded_cascade(&self) -> CascadeConfig {
        let mut c = self.cascade.clone();
        c.train.seed = self.seed;
        c
    }

    pub fn seeded_crossing_detector(&self) -> CrossingDetectorConfig {
        let mut c = self.crossing_detector.clone();
        c.train.seed = self.seed ^ 0x5eed_dcd0;
        c
    }
}
