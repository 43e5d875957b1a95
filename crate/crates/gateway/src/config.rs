use std::path::{Path, PathBuf};

use dxagent_core::llm::LlmBackendRef;
use dxagent_core::registry::reference_manifests;
use dxagent_core::{CoordinationStrategy, ToolManifest};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("invalid default_strategy {0:?}")]
    Strategy(String),
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("dxagent-data")
}

/// Gateway settings, read from TOML.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// data_dir = "/var/lib/dxagent"
/// default_strategy = "llm"        # average | vote | llm | llm:vote
///
/// [llm]
/// kind = "remote"
/// endpoint = "https://llm.example.org/v1"
/// model_name = "some-model"
///
/// [[tools]]
/// tool_id = "mm-diag"
/// ...
/// ```
///
/// Without `[[tools]]` the reference four-tool registry is used. Without
/// `[llm]` the `DXAGENT_LLM_URL` / `DXAGENT_LLM_MODEL` variables are
/// consulted, and LLM coordination falls back when neither is present.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub default_strategy: Option<String>,
    #[serde(default)]
    pub llm_intent: bool,
    #[serde(default)]
    pub llm: Option<LlmBackendRef>,
    #[serde(default)]
    pub tools: Vec<ToolManifest>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            data_dir: default_data_dir(),
            default_strategy: None,
            llm_intent: false,
            llm: None,
            tools: Vec::new(),
        }
    }
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = toml::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.strategy()?;
        Ok(config)
    }

    pub fn strategy(&self) -> Result<CoordinationStrategy, ConfigError> {
        match &self.default_strategy {
            None => Ok(CoordinationStrategy::default()),
            Some(s) => s.parse().map_err(|_| ConfigError::Strategy(s.clone())),
        }
    }

    pub fn manifests(&self) -> Vec<ToolManifest> {
        if self.tools.is_empty() {
            reference_manifests()
        } else {
            self.tools.clone()
        }
    }

    pub fn llm_ref(&self) -> Option<LlmBackendRef> {
        self.llm.clone().or_else(LlmBackendRef::remote_from_env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = r#"
            listen = "0.0.0.0:9000"
            data_dir = "/tmp/x"
            default_strategy = "vote"

            [llm]
            kind = "rule"
            rule = "echo-vote"

            [[tools]]
            tool_id = "t"
            task = "prognosis"
            required_modalities = ["mri"]
            description = "d"
            backends = [{ model_id = "a", endpoint = "mock:probs=0.4,0.6" }]
        "#;
        let c: GatewayConfig = toml::from_str(text).unwrap();
        assert_eq!(c.strategy().unwrap(), CoordinationStrategy::Vote);
        assert_eq!(c.manifests().len(), 1);
        assert!(matches!(c.llm_ref(), Some(LlmBackendRef::Rule { .. })));
    }

    #[test]
    fn defaults_and_bad_strategy() {
        let c: GatewayConfig = toml::from_str("").unwrap();
        assert_eq!(c.manifests().len(), 4);
        assert_eq!(c.strategy().unwrap(), CoordinationStrategy::default());
        let c: GatewayConfig = toml::from_str("default_strategy = \"majority\"").unwrap();
        assert!(c.strategy().is_err());
        assert!(toml::from_str::<GatewayConfig>("port = 1").is_err());
    }
}
