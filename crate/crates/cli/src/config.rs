//! Pipeline configuration file and command-line overrides.

use std::path::{Path, PathBuf};

use posforge::clients::ServiceEndpoint;
use posforge::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_seed() -> u64 {
    42
}
fn default_delta() -> f64 {
    posforge::verify::DEFAULT_DELTA
}
fn default_k() -> usize {
    20
}
fn default_buckets() -> String {
    "squad-posq".into()
}
fn default_workers() -> usize {
    4
}
fn default_segments() -> usize {
    3
}
fn default_chunk() -> usize {
    64
}
fn default_hist_bins() -> usize {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chat: Option<ServiceEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<ServiceEndpoint>,
    #[serde(default)]
    pub rerankers: Vec<ServiceEndpoint>,
}

/// Contents of the TOML config. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personas: Option<PathBuf>,
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_k")]
    pub persona_k: usize,
    /// Characters of the document embedded for persona retrieval; the
    /// whole document when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_truncate_chars: Option<usize>,
    /// A preset name or an interval list such as `[0,100),[100,inf)`.
    #[serde(default = "default_buckets")]
    pub bucket_edges: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    /// Documents (generate) or candidates (verify) per appended chunk.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "default_hist_bins")]
    pub histogram_bins: usize,
    /// Separator placed around moved evidence; empty by default.
    #[serde(default)]
    pub evidence_joiner: String,
    #[serde(default)]
    pub endpoints: Endpoints,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Validation(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.persona_k == 0 {
            return Err(Error::Validation("persona_k must be >= 1".into()));
        }
        if self.workers == 0 || self.chunk_size == 0 {
            return Err(Error::Validation("workers and chunk_size must be >= 1".into()));
        }
        let eps = self.endpoints.chat.iter().chain(&self.endpoints.embed).chain(&self.endpoints.rerankers);
        for ep in eps {
            ep.validate()?;
        }
        Ok(())
    }
}

/// A loaded config plus the directory its relative paths refer to.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                config: PipelineConfig::default(),
                base: PathBuf::from("."),
            });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config: PipelineConfig::from_toml(&text)?,
            base,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn required(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        p.as_ref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Validation(format!("config does not set `{what}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_endpoints() {
        let c = PipelineConfig::from_toml(
            r#"
            corpus = "data/corpus.jsonl"
            [endpoints.chat]
            id = "gen"
            base_url = "mock://1"
            [[endpoints.rerankers]]
            id = "r1"
            base_url = "http://localhost:8000"
            max_batch = 16
            "#,
        )
        .unwrap();
        assert_eq!(c.delta, 0.3);
        assert_eq!(c.persona_k, 20);
        assert_eq!(c.seed, 42);
        assert_eq!(c.endpoints.rerankers[0].max_batch, 16);
        assert_eq!(c.endpoints.chat.as_ref().unwrap().max_retries, 3);
        c.validate().unwrap();
        assert!(PipelineConfig::from_toml("unknown_key = 1").is_err());
        let bad = PipelineConfig {
            delta: -0.1,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
