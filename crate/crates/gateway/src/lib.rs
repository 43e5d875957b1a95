//! HTTP gateway for the dxagent engine: sessions, NIfTI uploads, queries,
//! live trace streaming over server-sent events, and crash-safe persistence.

pub mod config;
pub mod http;
pub mod service;
pub mod store;

use std::sync::Arc;

use dxagent_core::engine::EngineConfig;
use dxagent_core::llm::LlmError;
use dxagent_core::registry::RegistryError;
use dxagent_core::{Engine, ToolInvoker, ToolRegistry};
use thiserror::Error;

pub use config::GatewayConfig;
pub use service::{Gateway, GatewayError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("tool registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("LLM backend: {0}")]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Builds the engine and opens the session store described by `config`.
pub fn build_gateway(config: &GatewayConfig) -> Result<Gateway, BuildError> {
    let registry = ToolRegistry::from_manifests(config.manifests())?;
    let llm = match config.llm_ref() {
        Some(r) => {
            tracing::info!(llm = ?r, "LLM backend configured");
            Some(r.build()?)
        }
        None => {
            tracing::warn!("no LLM backend configured; LLM coordination will use its fallback");
            None
        }
    };
    let engine = Engine::new(Arc::new(registry), ToolInvoker::default())
        .with_llm(llm)
        .with_config(EngineConfig {
            llm_intent: config.llm_intent,
        });
    Ok(Gateway::open(engine, &config.data_dir, config.strategy()?)?)
}

pub fn app(gateway: Gateway) -> axum::Router {
    http::router(Arc::new(gateway))
}
