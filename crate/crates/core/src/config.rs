//! Run configuration files and their content hash.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisConfig;
use crate::bench::BenchConfig;
use crate::corpus::CorpusSpec;
use crate::error::{LngramError, Result};
use crate::model::DecoderConfig;
use crate::train::TrainConfig;

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Everything a command can be configured with. Each section falls back to
/// its defaults; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub analysis: AnalysisConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LngramError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        self.analysis.validate()?;
        self.bench.validate()
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| LngramError::Config(e.message().to_string()))
}
