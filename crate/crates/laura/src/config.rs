//! Run configuration: a single TOML file with environment-variable
//! interpolation for secrets, plus the config hash that names runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::services::http::EndpointConfig;
use crate::{Error, Result};

pub fn default_language_set() -> Vec<String> {
    ["ar", "de", "en", "es", "fi", "fr", "it", "ja", "ko", "pt", "ru", "th", "zh"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub url: String,
    #[serde(default)]
    pub auth: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_retries() -> u32 {
    3
}
fn default_max_in_flight() -> usize {
    8
}

impl EndpointSpec {
    pub fn to_endpoint_config(&self) -> EndpointConfig {
        EndpointConfig {
            url: self.url.clone(),
            auth: self.auth.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
            retries: self.retries,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub retriever: Option<EndpointSpec>,
    pub reranker: Option<EndpointSpec>,
    #[serde(default)]
    pub generator: BTreeMap<String, EndpointSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_language_set")]
    pub language_set: Vec<String>,
    #[serde(default = "crate::corpus::default_char_segmented")]
    pub char_segmented_languages: BTreeSet<String>,
    #[serde(default)]
    pub endpoints: Endpoints,
    /// Top-k for the vanilla/oracle retrieval stage.
    #[serde(default = "default_retrieval_top_k")]
    pub retrieval_top_k: usize,
    /// Top-k for the training-data retrieval stage.
    #[serde(default = "default_laura_retrieval_top_k")]
    pub laura_retrieval_top_k: usize,
    #[serde(default = "default_rerank_top_k")]
    pub rerank_top_k: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_k_negatives")]
    pub k_negatives: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prompt_template")]
    pub prompt_template: String,
}

fn default_retrieval_top_k() -> usize {
    50
}
fn default_laura_retrieval_top_k() -> usize {
    100
}
fn default_rerank_top_k() -> usize {
    5
}
fn default_theta() -> f64 {
    0.8
}
fn default_k_negatives() -> usize {
    7
}
fn default_prompt_template() -> String {
    "{question}".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

/// Replace `${VAR}` with the value of environment variable VAR.
fn interpolate_env(raw: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| {
            Error::Config("unterminated ${...} environment reference".into())
        })?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| Error::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let raw = interpolate_env(&raw)?;
        let config: RunConfig = toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.language_set.is_empty() {
            return Err(Error::Config("language_set must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must be in [0,1], got {}", self.theta)));
        }
        if self.retrieval_top_k == 0 || self.laura_retrieval_top_k == 0 || self.rerank_top_k == 0 {
            return Err(Error::Config("top-k values must be >= 1".into()));
        }
        if self.k_negatives == 0 {
            return Err(Error::Config("k_negatives must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hash over the semantically meaningful fields; identical
    /// across re-serialization because field order is fixed by the struct
    /// and maps are ordered.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("serializable config");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}
