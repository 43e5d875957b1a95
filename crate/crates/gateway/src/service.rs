use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use dxagent_core::nifti::{self, NiftiError};
use dxagent_core::{AgentResponse, CoordinationStrategy, Engine, Modality, Query, ScanRef, SessionState, TraceEvent};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::store::{self, LogRecord, SessionLog, StoreError};

/// Live subscribers that fall this far behind re-read from the feed.
const BROADCAST_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("modality must be mri or pet, got {0:?}")]
    InvalidModality(String),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("query text is empty")]
    EmptyQuery,
    #[error("{0}")]
    InvalidRequest(String),
    #[error("storage failure: {0}")]
    Storage(#[from] StoreError),
}

impl GatewayError {
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::UnknownSession(_) => "UnknownSession",
            GatewayError::InvalidModality(_) => "InvalidModality",
            GatewayError::Nifti(e) => e.kind(),
            GatewayError::EmptyQuery => "EmptyQuery",
            GatewayError::InvalidRequest(_) => "InvalidRequest",
            GatewayError::Storage(_) => "StorageFailure",
        }
    }
}

/// Published trace of one session plus the channel live readers listen on.
/// Publishing and subscribing happen under the same lock, so a reader that
/// takes a snapshot and then drains its receiver sees every event exactly
/// once.
pub struct TraceFeed {
    events: Mutex<Vec<TraceEvent>>,
    tx: broadcast::Sender<TraceEvent>,
}

impl TraceFeed {
    fn new(events: Vec<TraceEvent>) -> Self {
        let (tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        Self {
            events: Mutex::new(events),
            tx,
        }
    }

    fn publish(&self, event: &TraceEvent) {
        let mut events = self.events.lock().expect("feed lock");
        events.push(event.clone());
        let _ = self.tx.send(event.clone());
    }

    /// Events with `seq >= from_seq` and a receiver for everything after.
    pub fn subscribe(&self, from_seq: u64) -> (Vec<TraceEvent>, broadcast::Receiver<TraceEvent>) {
        let events = self.events.lock().expect("feed lock");
        let rx = self.tx.subscribe();
        (events.iter().filter(|e| e.seq >= from_seq).cloned().collect(), rx)
    }

    pub fn since(&self, from_seq: u64) -> Vec<TraceEvent> {
        let events = self.events.lock().expect("feed lock");
        events.iter().filter(|e| e.seq >= from_seq).cloned().collect()
    }
}

struct SessionInner {
    state: SessionState,
    strategy: CoordinationStrategy,
    log: SessionLog,
}

pub struct Session {
    pub id: String,
    pub created_at: DateTime<Utc>,
    dir: PathBuf,
    inner: tokio::sync::Mutex<SessionInner>,
    feed: TraceFeed,
}

impl Session {
    pub fn feed(&self) -> &TraceFeed {
        &self.feed
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub strategy: CoordinationStrategy,
}

#[derive(Debug, Clone, Serialize)]
pub struct Exchange {
    pub query: Query,
    pub response: AgentResponse,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub strategy: CoordinationStrategy,
    pub scans: Vec<ScanRef>,
    pub history: Vec<Exchange>,
    pub trace_len: usize,
    pub next_seq: u64,
}

/// Owns all sessions. Work on one session is serialized by its mutex;
/// different sessions proceed in parallel.
pub struct Gateway {
    engine: Engine,
    data_dir: PathBuf,
    default_strategy: CoordinationStrategy,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl Gateway {
    /// Opens `data_dir`, replaying every persisted session.
    pub fn open(engine: Engine, data_dir: &Path, default_strategy: CoordinationStrategy) -> Result<Self, GatewayError> {
        let mut sessions = HashMap::new();
        for r in store::restore_all(data_dir)? {
            let id = r.state.session_id.clone();
            let session = Session {
                dir: store::session_dir(data_dir, &id),
                id: id.clone(),
                created_at: r.created_at,
                feed: TraceFeed::new(r.state.trace().to_vec()),
                inner: tokio::sync::Mutex::new(SessionInner {
                    state: r.state,
                    strategy: r.strategy,
                    log: r.log,
                }),
            };
            sessions.insert(id, Arc::new(session));
        }
        tracing::info!(sessions = sessions.len(), dir = %data_dir.display(), "session store opened");
        Ok(Self {
            engine,
            data_dir: data_dir.to_path_buf(),
            default_strategy,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("sessions lock").len()
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, GatewayError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self, strategy: Option<CoordinationStrategy>) -> Result<SessionCreated, GatewayError> {
        let id = uuid::Uuid::new_v4().to_string();
        let created_at = Utc::now();
        let strategy = strategy.unwrap_or(self.default_strategy);
        let dir = store::session_dir(&self.data_dir, &id);
        let mut log = SessionLog::create(&dir)?;
        log.append(&[LogRecord::Created {
            session_id: id.clone(),
            created_at,
            strategy,
        }])?;
        let session = Session {
            id: id.clone(),
            created_at,
            dir,
            inner: tokio::sync::Mutex::new(SessionInner {
                state: SessionState::new(id.clone()),
                strategy,
                log,
            }),
            feed: TraceFeed::new(Vec::new()),
        };
        self.sessions.write().expect("sessions lock").insert(id.clone(), Arc::new(session));
        tracing::info!(session = %id, %strategy, "session created");
        Ok(SessionCreated {
            session_id: id,
            created_at,
            strategy,
        })
    }

    pub async fn set_strategy(&self, id: &str, strategy: CoordinationStrategy) -> Result<(), GatewayError> {
        let session = self.session(id)?;
        let mut inner = session.inner.lock().await;
        inner.log.append(&[LogRecord::Strategy { strategy }])?;
        inner.strategy = strategy;
        Ok(())
    }

    /// Validates and stores a scan, replacing any earlier scan of the same
    /// modality. The scan id is derived from the content.
    pub async fn upload_scan(&self, id: &str, modality: &str, bytes: &[u8]) -> Result<ScanRef, GatewayError> {
        let session = self.session(id)?;
        let modality = Modality::from_tag(modality).ok_or_else(|| GatewayError::InvalidModality(modality.to_string()))?;
        let header = nifti::parse_file_bytes(bytes)?;
        let digest = hex::encode(Sha256::digest(bytes));
        let scan_id = format!("{}-{}", modality.tag(), &digest[..16]);
        let ext = if bytes.starts_with(&[0x1f, 0x8b]) { "nii.gz" } else { "nii" };
        // Validate before anything touches disk.
        nifti::validate_scan(&header, modality, &scan_id, "")?;

        let mut inner = session.inner.lock().await;
        let path = store::write_blob(&session.dir, &format!("{scan_id}.{ext}"), bytes)?;
        let scan = nifti::validate_scan(&header, modality, &scan_id, path.display().to_string())?;
        inner.log.append(&[LogRecord::Scan { scan: scan.clone() }])?;
        if let Some(old) = inner.state.put_scan(scan.clone()) {
            tracing::info!(session = %id, replaced = %old.id, "scan replaced");
        }
        Ok(scan)
    }

    /// Runs one episode. Trace events are persisted and published as the
    /// engine emits them; the exchange is persisted before returning.
    pub async fn post_query(
        &self,
        id: &str,
        text: &str,
        strategy: Option<CoordinationStrategy>,
    ) -> Result<AgentResponse, GatewayError> {
        let session = self.session(id)?;
        let query = Query::new(id, text, Vec::new()).map_err(|_| GatewayError::EmptyQuery)?;
        let mut guard = session.inner.lock().await;
        let SessionInner {
            state,
            strategy: session_strategy,
            log,
        } = &mut *guard;
        let strategy = strategy.unwrap_or(*session_strategy);

        let mut storage_error = None;
        let feed = &session.feed;
        let mut sink = |event: &TraceEvent| {
            if storage_error.is_none() {
                if let Err(e) = log.append(&[LogRecord::Trace { event: event.clone() }]) {
                    storage_error = Some(e);
                }
            }
            feed.publish(event);
        };
        let response = self.engine.run_episode(query.clone(), state, strategy, &mut sink).await;
        if let Some(e) = storage_error {
            return Err(e.into());
        }
        log.append(&[LogRecord::Exchange {
            query,
            response: response.clone(),
        }])?;
        Ok(response)
    }

    pub async fn summary(&self, id: &str) -> Result<SessionSummary, GatewayError> {
        let session = self.session(id)?;
        let inner = session.inner.lock().await;
        Ok(SessionSummary {
            session_id: session.id.clone(),
            created_at: session.created_at,
            strategy: inner.strategy,
            scans: inner.state.scans().values().cloned().collect(),
            history: inner
                .state
                .history()
                .iter()
                .map(|(q, r)| Exchange {
                    query: q.clone(),
                    response: r.clone(),
                })
                .collect(),
            trace_len: inner.state.trace().len(),
            next_seq: inner.state.next_seq(),
        })
    }
}
