#![allow(dead_code)]

use std::path::Path;

use dxagent_core::nifti::{Endianness, NiftiHeader};
use dxagent_gateway::GatewayConfig;
use serde_json::Value;

/// A small valid `.nii` body: header, extension flag and a few voxels.
pub fn nifti_bytes(dims: [i16; 3], endianness: Endianness) -> Vec<u8> {
    let header = NiftiHeader::new([3, dims[0], dims[1], dims[2], 1, 1, 1, 1], 16, 32, endianness);
    let mut out = header.to_bytes().to_vec();
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&[7; 64]);
    out
}

pub async fn spawn_gateway(data_dir: &Path, configure: impl FnOnce(&mut GatewayConfig)) -> String {
    let mut cfg = GatewayConfig {
        data_dir: data_dir.to_path_buf(),
        ..GatewayConfig::default()
    };
    configure(&mut cfg);
    let gateway = dxagent_gateway::build_gateway(&cfg).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, dxagent_gateway::app(gateway)).await.unwrap() });
    format!("http://{addr}")
}

/// `data:` payloads of a complete SSE body.
pub fn sse_data(body: &str) -> Vec<String> {
    body.lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| d.strip_prefix(' ').unwrap_or(d).to_string())
        .collect()
}

pub fn sse_events(body: &str) -> Vec<Value> {
    sse_data(body).iter().map(|d| serde_json::from_str(d).unwrap()).collect()
}

pub struct Client {
    pub base: String,
    pub http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into(),
            http: reqwest::Client::new(),
        }
    }

    pub async fn create_session(&self, body: Option<Value>) -> String {
        let mut req = self.http.post(format!("{}/sessions", self.base));
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        assert_eq!(resp.status(), 201);
        let v: Value = resp.json().await.unwrap();
        v["session_id"].as_str().unwrap().to_string()
    }

    pub async fn upload(&self, session: &str, modality: &str, bytes: Vec<u8>) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}/sessions/{session}/scans?modality={modality}", self.base))
            .body(bytes)
            .send()
            .await
            .unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap())
    }

    pub async fn query(&self, session: &str, text: &str) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}/sessions/{session}/query", self.base))
            .json(&serde_json::json!({ "text": text }))
            .send()
            .await
            .unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap())
    }

    /// The persisted trace from `from_seq`, as raw SSE `data` payloads.
    pub async fn trace(&self, session: &str, from_seq: u64) -> Vec<String> {
        let resp = self
            .http
            .get(format!("{}/sessions/{session}/trace?from_seq={from_seq}&follow=false", self.base))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        sse_data(&resp.text().await.unwrap())
    }
}
