//! Tool manifests, modality-aware routing and tool invocation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendConnector, DefaultConnector, PredictRequest};
use crate::domain::{Modality, ModelOutcome, ScanRef, TaskKind, ToolOutcome};

pub const DEFAULT_BACKEND_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("tool {0:?} is already registered")]
    DuplicateToolId(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("no registered {task} tool accepts modalities {available:?}")]
    NoApplicableTool {
        task: TaskKind,
        available: BTreeSet<Modality>,
    },
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("cannot read manifest file: {0}")]
    Io(String),
}

impl RegistryError {
    pub fn kind(&self) -> &'static str {
        match self {
            RegistryError::DuplicateToolId(_) => "DuplicateToolId",
            RegistryError::InvalidManifest(_) => "InvalidManifest",
            RegistryError::NoApplicableTool { .. } => "NoApplicableTool",
            RegistryError::UnknownTool(_) => "UnknownTool",
            RegistryError::Io(_) => "Io",
        }
    }
}

fn default_timeout() -> u64 {
    DEFAULT_BACKEND_TIMEOUT_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelBackendRef {
    pub model_id: String,
    /// `http(s)://host:port` of a tool server, or a `mock:` tag.
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

impl ModelBackendRef {
    pub fn new(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            timeout_ms: DEFAULT_BACKEND_TIMEOUT_MS,
        }
    }

    pub fn with_timeout(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }
}

/// Declarative description of a tool: what it predicts, which scans it
/// needs, and the models that collaborate behind it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawManifest")]
pub struct ToolManifest {
    pub tool_id: String,
    pub task: TaskKind,
    pub required_modalities: BTreeSet<Modality>,
    pub description: String,
    pub backends: Vec<ModelBackendRef>,
}

#[derive(Deserialize)]
struct RawManifest {
    tool_id: String,
    task: TaskKind,
    required_modalities: BTreeSet<Modality>,
    #[serde(default)]
    description: String,
    backends: Vec<ModelBackendRef>,
}

impl TryFrom<RawManifest> for ToolManifest {
    type Error = RegistryError;

    fn try_from(raw: RawManifest) -> Result<Self, Self::Error> {
        ToolManifest::new(
            raw.tool_id,
            raw.task,
            raw.required_modalities,
            raw.description,
            raw.backends,
        )
    }
}

impl ToolManifest {
    pub fn new(
        tool_id: impl Into<String>,
        task: TaskKind,
        required_modalities: impl IntoIterator<Item = Modality>,
        description: impl Into<String>,
        backends: Vec<ModelBackendRef>,
    ) -> Result<Self, RegistryError> {
        let tool_id = tool_id.into();
        if tool_id.trim().is_empty() {
            return Err(RegistryError::InvalidManifest("tool_id is empty".into()));
        }
        let required_modalities: BTreeSet<_> = required_modalities.into_iter().collect();
        if required_modalities.is_empty() {
            return Err(RegistryError::InvalidManifest(format!(
                "{tool_id}: required_modalities is empty"
            )));
        }
        if backends.is_empty() {
            return Err(RegistryError::InvalidManifest(format!(
                "{tool_id}: backends is empty"
            )));
        }
        let mut seen = BTreeSet::new();
        for b in &backends {
            if b.timeout_ms == 0 {
                return Err(RegistryError::InvalidManifest(format!(
                    "{tool_id}/{}: timeout_ms must be positive",
                    b.model_id
                )));
            }
            if !seen.insert(&b.model_id) {
                return Err(RegistryError::InvalidManifest(format!(
                    "{tool_id}: duplicate model_id {}",
                    b.model_id
                )));
            }
        }
        Ok(Self {
            tool_id,
            task,
            required_modalities,
            description: description.into(),
            backends,
        })
    }
}

/// On-disk manifest document: `{"tools": [...]}` in JSON or `[[tools]]` in TOML.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ManifestFile {
    #[serde(default)]
    pub tools: Vec<ToolManifest>,
}

impl ManifestFile {
    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|e| RegistryError::Io(e.to_string()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| RegistryError::InvalidManifest(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| RegistryError::InvalidManifest(e.to_string()))
        }
    }
}

#[derive(Debug, Default)]
pub struct ToolRegistry {
    tools: RwLock<BTreeMap<String, ToolManifest>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_manifests(
        manifests: impl IntoIterator<Item = ToolManifest>,
    ) -> Result<Self, RegistryError> {
        let registry = Self::new();
        for m in manifests {
            registry.register_tool(m)?;
        }
        Ok(registry)
    }

    /// Adds a tool; it is resolvable as soon as this returns.
    pub fn register_tool(&self, manifest: ToolManifest) -> Result<(), RegistryError> {
        let mut tools = self.tools.write().expect("registry lock poisoned");
        if tools.contains_key(&manifest.tool_id) {
            return Err(RegistryError::DuplicateToolId(manifest.tool_id));
        }
        tools.insert(manifest.tool_id.clone(), manifest);
        Ok(())
    }

    pub fn get(&self, tool_id: &str) -> Option<ToolManifest> {
        self.tools.read().expect("registry lock poisoned").get(tool_id).cloned()
    }

    pub fn list(&self) -> Vec<ToolManifest> {
        self.tools.read().expect("registry lock poisoned").values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tools.read().expect("registry lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every tool for `task` whose required modalities are all available,
    /// most specific first (more required modalities), then by tool_id.
    pub fn resolve_tools(
        &self,
        task: TaskKind,
        available: &BTreeSet<Modality>,
    ) -> Result<Vec<String>, RegistryError> {
        let tools = self.tools.read().expect("registry lock poisoned");
        let mut matching: Vec<&ToolManifest> = tools
            .values()
            .filter(|m| m.task == task && m.required_modalities.is_subset(available))
            .collect();
        matching.sort_by(|a, b| {
            b.required_modalities
                .len()
                .cmp(&a.required_modalities.len())
                .then_with(|| a.tool_id.cmp(&b.tool_id))
        });
        if matching.is_empty() {
            return Err(RegistryError::NoApplicableTool {
                task,
                available: available.clone(),
            });
        }
        Ok(matching.into_iter().map(|m| m.tool_id.clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvokeError {
    #[error("tool {tool_id} needs a {modality} scan")]
    MissingModality { tool_id: String, modality: Modality },
    #[error("scan {0} has not been validated")]
    UnvalidatedScan(String),
    #[error("all {} backends of {} failed", .0.outcomes().len(), .0.tool_id)]
    AllBackendsFailed(ToolOutcome),
}

impl InvokeError {
    pub fn kind(&self) -> &'static str {
        match self {
            InvokeError::MissingModality { .. } => "MissingModality",
            InvokeError::UnvalidatedScan(_) => "UnvalidatedScan",
            InvokeError::AllBackendsFailed(_) => "AllBackendsFailed",
        }
    }
}

/// Fans a tool call out to its model backends.
#[derive(Clone)]
pub struct ToolInvoker {
    connector: Arc<dyn BackendConnector>,
}

impl Default for ToolInvoker {
    fn default() -> Self {
        Self::new(Arc::new(DefaultConnector::new()))
    }
}

impl ToolInvoker {
    pub fn new(connector: Arc<dyn BackendConnector>) -> Self {
        Self { connector }
    }

    /// Calls every backend concurrently and waits for all of them to answer
    /// or time out. Outcomes keep manifest order. A failing backend only
    /// marks its own outcome as failed.
    pub async fn invoke_tool(
        &self,
        manifest: &ToolManifest,
        inputs: &BTreeMap<Modality, ScanRef>,
    ) -> Result<ToolOutcome, InvokeError> {
        for &modality in &manifest.required_modalities {
            let scan = inputs.get(&modality).ok_or_else(|| InvokeError::MissingModality {
                tool_id: manifest.tool_id.clone(),
                modality,
            })?;
            if !scan.validated {
                return Err(InvokeError::UnvalidatedScan(scan.id.clone()));
            }
        }
        let request = PredictRequest {
            task: manifest.task,
            inputs: manifest
                .required_modalities
                .iter()
                .map(|m| (*m, inputs[m].source_uri.clone()))
                .collect(),
        };

        let calls = manifest.backends.iter().map(|b| {
            let backend = self.connector.connect(b);
            let request = &request;
            async move {
                let started = Instant::now();
                let timeout = Duration::from_millis(b.timeout_ms);
                let result = tokio::time::timeout(timeout, backend.predict(request)).await;
                let measured = started.elapsed().as_millis() as u64;
                match result {
                    Err(_) => ModelOutcome::failed(
                        &b.model_id,
                        format!("timeout after {} ms", b.timeout_ms),
                        b.timeout_ms,
                    ),
                    Ok(Err(f)) => ModelOutcome::failed(
                        &b.model_id,
                        f.reason,
                        f.reported_latency_ms.unwrap_or(measured),
                    ),
                    Ok(Ok(p)) => {
                        let latency = p.reported_latency_ms.unwrap_or(measured);
                        match p.response.into_distribution(manifest.task) {
                            Ok(d) => ModelOutcome::ok(&b.model_id, d, latency),
                            Err(e) => ModelOutcome::failed(
                                &b.model_id,
                                format!("protocol error: {e}"),
                                latency,
                            ),
                        }
                    }
                }
            }
        });
        let outcomes = join_all(calls).await;
        let outcome = ToolOutcome::new(&manifest.tool_id, manifest.task, outcomes)
            .expect("manifest guarantees at least one backend");
        if outcome.ok_count() == 0 {
            tracing::warn!(tool = %manifest.tool_id, "all backends failed");
            return Err(InvokeError::AllBackendsFailed(outcome));
        }
        Ok(outcome)
    }
}

/// The reference four-tool configuration: multi-modal diagnosis and
/// prognosis over five models, and single-modality MRI and PET diagnosis
/// over four models each. Backends are deterministic `mock:` endpoints.
pub fn reference_manifests() -> Vec<ToolManifest> {
    const MM_MODELS: [&str; 5] = ["medicalnet", "nnmamba", "resnet50", "mcad", "cmvim"];
    const SINGLE_MODELS: [&str; 4] = ["medicalnet", "resnet50", "resnet34", "resnet18"];
    const DIAG_PROBS: [&str; 5] = [
        "0.2,0.5,0.3",
        "0.3,0.4,0.3",
        "0.1,0.6,0.3",
        "0.25,0.35,0.4",
        "0.15,0.55,0.3",
    ];
    const PROG_PROBS: [&str; 5] = ["0.7,0.3", "0.6,0.4", "0.45,0.55", "0.8,0.2", "0.35,0.65"];

    let backends = |models: &[&str], probs: &[&str]| -> Vec<ModelBackendRef> {
        models
            .iter()
            .zip(probs)
            .map(|(m, p)| ModelBackendRef::new(*m, format!("mock:probs={p}")))
            .collect()
    };
    let build = |id: &str, task, mods: &[Modality], desc: &str, b| {
        ToolManifest::new(id, task, mods.iter().copied(), desc, b).expect("valid reference manifest")
    };
    vec![
        build(
            "mm-diag",
            TaskKind::Diagnosis,
            &[Modality::Mri, Modality::Pet],
            "Stages CN/MCI/AD from paired MRI and PET",
            backends(&MM_MODELS, &DIAG_PROBS),
        ),
        build(
            "mm-prog",
            TaskKind::Prognosis,
            &[Modality::Mri, Modality::Pet],
            "Predicts MCI conversion to AD within 36 months from paired MRI and PET",
            backends(&MM_MODELS, &PROG_PROBS),
        ),
        build(
            "mri-diag",
            TaskKind::Diagnosis,
            &[Modality::Mri],
            "Stages CN/MCI/AD from MRI alone",
            backends(&SINGLE_MODELS, &DIAG_PROBS[..4]),
        ),
        build(
            "pet-diag",
            TaskKind::Diagnosis,
            &[Modality::Pet],
            "Stages CN/MCI/AD from PET alone",
            backends(&SINGLE_MODELS, &DIAG_PROBS[1..]),
        ),
    ]
}
