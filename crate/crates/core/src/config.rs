//! Pipeline configuration, loaded from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{DEFAULT_BINS, DEFAULT_TRUNC};
use crate::dataset::SynthConfig;
use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::preference::{RatingWeights, DEFAULT_CANDIDATES};
use crate::sft::SftConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    /// Rating log; relative paths resolve against `run_dir`.
    pub rating_log: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
            rating_log: "ratings.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub bins: usize,
    pub trunc: f64,
    pub min_frames: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            trunc: DEFAULT_TRUNC,
            min_frames: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    /// Width of each extractor stream.
    pub feature_dim: usize,
    pub projector_hidden: usize,
    /// Output width of the projector, i.e. the policy's vision input.
    pub vision_dim: usize,
    pub extractor_seed: u64,
    pub projector_seed: u64,
    pub max_text: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            projector_hidden: 32,
            vision_dim: 16,
            extractor_seed: 11,
            projector_seed: 12,
            max_text: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    pub n: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Render each candidate to a playback file.
    pub render: bool,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_CANDIDATES,
            temperature: 1.0,
            top_k: None,
            seed: 21,
            render: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples per test context; the first is the prediction, all feed diversity.
    pub samples: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 2,
            seed: 31,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub min_raters: usize,
    /// Salt for blinded candidate keys and per-rater order.
    pub blind_seed: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            min_raters: 1,
            blind_seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub codec: CodecConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub weights: RatingWeights,
    pub candidates: CandidateConfig,
    pub eval: EvalConfig,
    pub annotation: AnnotationConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Paths in the file are relative to the file.
        if let Some(base) = path.parent().filter(|b| !b.as_os_str().is_empty()) {
            cfg.paths.data_dir = base.join(&cfg.paths.data_dir);
            cfg.paths.run_dir = base.join(&cfg.paths.run_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.sft.validate()?;
        self.dpo.validate()?;
        if self.codec.bins < 2 || self.codec.bins > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("bins must be in 2..=65536, got {}", self.codec.bins)));
        }
        if !(0.0..0.5).contains(&self.codec.trunc) {
            return Err(Error::Config(format!("trunc must be in [0, 0.5), got {}", self.codec.trunc)));
        }
        if self.candidates.n == 0 {
            return Err(Error::Config("candidate count must be at least 1".into()));
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be at least 1".into()));
        }
        if self.annotation.min_raters == 0 {
            return Err(Error::Config("min_raters must be at least 1".into()));
        }
        Ok(())
    }

    /// Check that the input paths a verb depends on exist.
    pub fn check_paths(&self, need_data: bool) -> Result<()> {
        if need_data && !self.paths.data_dir.is_dir() {
            return Err(Error::Config(format!("data_dir {} does not exist", self.paths.data_dir.display())));
        }
        Ok(())
    }

    pub fn rating_log_path(&self) -> PathBuf {
        if self.paths.rating_log.is_absolute() {
            self.paths.rating_log.clone()
        } else {
            self.paths.run_dir.join(&self.paths.rating_log)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PipelineConfig::from_toml("[model]\nd_model = 32\n[sft]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.sft.steps, 10);
        assert_eq!(cfg.codec.bins, 256);
        assert_eq!(cfg.codec.trunc, 0.01);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let text = "[weights]\nempathy = 0.5\nappropriateness = 0.5\nengagement = 0.5\nnaturalness = 0.0\n";
        assert!(PipelineConfig::from_toml(text).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        fs::write(&path, "[paths]\ndata_dir = \"d\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.data_dir, dir.path().join("d"));
        assert_eq!(cfg.rating_log_path(), dir.path().join("run").join("ratings.jsonl"));
        assert!(cfg.check_paths(true).is_err());
    }
}
