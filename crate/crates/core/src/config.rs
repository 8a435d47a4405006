//! Run configuration: defaults, TOML file, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureSpec;
use crate::model::{ModelConfig, ModelError};
use crate::train::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Seed for assigning listeners to channels without a speaker entry.
    pub speaker_seed: u64,
    pub strict: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { speaker_seed: 1234, strict: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Seed for the unknown-word vector.
    pub unk_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { unk_seed: 1234 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every component seed.
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), source: Box::new(e) })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: origin.clone(), source })?;
        Self::from_toml(&text, &origin)
    }

    /// Propagates `seed` and checks invariants.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        if let Some(seed) = self.seed {
            self.corpus.speaker_seed = seed;
            self.features.unk_seed = seed;
            self.train.seed = seed;
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The subset of settings that determines cached feature values.
    pub fn feature_spec(&self, embeddings_sha256: String) -> FeatureSpec {
        FeatureSpec {
            n_words: self.model.lexical.n_words,
            window_ms: self.model.acoustic.window_ms,
            frame: self.model.acoustic.frame,
            feature_kind: self.model.acoustic.feature_kind,
            unk_seed: self.features.unk_seed,
            embeddings_sha256,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerKind;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_toml("", "x").unwrap(), RunConfig::default());
    }

    #[test]
    fn file_overrides_defaults() {
        let cfg = RunConfig::from_toml(
            "[train]\nlearning_rate = 0.01\noptimizer = \"sgd\"\n[model.lexical]\nn_words = 15\n",
            "x",
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.model.lexical.n_words, 15);
        assert_eq!(cfg.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearnig_rate = 0.01\n", "x").is_err());
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig { seed: Some(7), ..Default::default() }.resolve().unwrap();
        assert_eq!((cfg.corpus.speaker_seed, cfg.features.unk_seed, cfg.train.seed), (7, 7, 7));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.max_epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.use_listener = false;
        cfg.train.seed = 99;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), "x").unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 0;
        assert!(cfg.resolve().is_err());
    }
}
