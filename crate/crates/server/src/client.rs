//! HTTP client for the gateway and node endpoints.

use std::collections::BTreeMap;

use batchstore_core::metrics::parse_exposition;
use batchstore_core::model::{BatchRequest, ExecutionId};
use batchstore_core::placement::ClusterMap;
use batchstore_core::tar::{parse_archive, ArchiveEntry, ReadError};
use bytes::Bytes;
use reqwest::{header, Response, StatusCode};
use thiserror::Error;

use crate::http::{encode_path, DebugState};
use crate::pressure::FaultSpec;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("rate limited (429): {0}")]
    RateLimited(String),
    #[error("HTTP {code}: {body}")]
    Status { code: StatusCode, body: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("response archive is truncated or malformed: {0}")]
    Archive(#[from] ReadError),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// A completed GetBatch.
#[derive(Debug, Clone)]
pub struct BatchResponse {
    pub exec_id: Option<ExecutionId>,
    pub dt_url: String,
    pub raw: Bytes,
    pub entries: Vec<ArchiveEntry>,
}

impl BatchResponse {
    pub fn payload_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.payload.len() as u64).sum()
    }
}

#[derive(Clone)]
pub struct GatewayClient {
    base: String,
    http: reqwest::Client,
}

async fn check(resp: Response) -> Result<Response> {
    let code = resp.status();
    if code.is_success() {
        return Ok(resp);
    }
    let body = resp.text().await.unwrap_or_default();
    if code == StatusCode::TOO_MANY_REQUESTS {
        Err(ClientError::RateLimited(body))
    } else {
        Err(ClientError::Status { code, body })
    }
}

fn location(resp: &Response) -> Result<String> {
    resp.headers()
        .get(header::LOCATION)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .ok_or_else(|| ClientError::Protocol("redirect without Location".into()))
}

impl GatewayClient {
    pub fn new(base: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client builds");
        Self::with_client(base, http)
    }

    /// Uses a caller-built client; it must not follow redirects on its own.
    pub fn with_client(base: impl Into<String>, http: reqwest::Client) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        GatewayClient { base, http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn object_url(&self, bucket: &str, objname: &str) -> String {
        format!(
            "{}/v1/objects/{}/{}",
            self.base,
            encode_path(bucket).replace('/', "%2F"),
            encode_path(objname)
        )
    }

    pub async fn put_object(&self, bucket: &str, objname: &str, content: impl Into<Bytes>) -> Result<()> {
        let resp = self
            .http
            .put(self.object_url(bucket, objname))
            .body(content.into())
            .send()
            .await?;
        check(resp).await.map(|_| ())
    }

    pub async fn delete_object(&self, bucket: &str, objname: &str) -> Result<()> {
        let resp = self.http.delete(self.object_url(bucket, objname)).send().await?;
        check(resp).await.map(|_| ())
    }

    /// Per-object GET, following the gateway's redirect to the owner.
    pub async fn get_object(&self, bucket: &str, objname: &str, archpath: Option<&str>) -> Result<Bytes> {
        Ok(self.open_object(bucket, objname, archpath).await?.bytes().await?)
    }

    /// Like [`get_object`](Self::get_object) but leaves the body unread.
    pub async fn open_object(&self, bucket: &str, objname: &str, archpath: Option<&str>) -> Result<Response> {
        let mut req = self.http.get(self.object_url(bucket, objname));
        if let Some(a) = archpath {
            req = req.query(&[("archpath", a)]);
        }
        let mut resp = req.send().await?;
        for _ in 0..4 {
            if resp.status() != StatusCode::TEMPORARY_REDIRECT {
                break;
            }
            resp = self.http.get(location(&resp)?).send().await?;
        }
        check(resp).await
    }

    pub async fn cluster_map(&self) -> Result<ClusterMap> {
        let resp = self.http.get(format!("{}/v1/cluster", self.base)).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    /// Phase one and two only: returns the redirect target without following it.
    pub async fn submit_batch(&self, body: Bytes, coloc: Option<u64>) -> Result<(String, Option<ExecutionId>)> {
        let mut req = self
            .http
            .get(format!("{}/v1/batch", self.base))
            .header(header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(c) = coloc {
            req = req.query(&[("coloc", c)]);
        }
        let resp = req.send().await?;
        if resp.status() != StatusCode::TEMPORARY_REDIRECT {
            check(resp).await?;
            return Err(ClientError::Protocol("gateway did not redirect".into()));
        }
        let exec = resp
            .headers()
            .get("x-exec-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.parse().ok());
        Ok((location(&resp)?, exec))
    }

    /// Submits the batch and opens the DT stream; the body is not yet read.
    pub async fn open_batch(&self, req: &BatchRequest, coloc: Option<u64>) -> Result<(Response, String, Option<ExecutionId>)> {
        let (loc, exec) = self.submit_batch(Bytes::from(req.to_json()), coloc).await?;
        let resp = check(self.http.get(&loc).send().await?).await?;
        let ctype = resp
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("");
        if ctype != "application/x-tar" {
            return Err(ClientError::Protocol(format!("unexpected content type {ctype:?}")));
        }
        Ok((resp, loc, exec))
    }

    /// Full GetBatch: submit, follow the redirect, read and parse the archive.
    pub async fn get_batch(&self, req: &BatchRequest, coloc: Option<u64>) -> Result<BatchResponse> {
        let (resp, dt_url, exec_id) = self.open_batch(req, coloc).await?;
        let raw = resp.bytes().await.map_err(|e| {
            // a DT that aborts mid-stream cuts the body short
            ClientError::Protocol(format!("stream aborted: {e}"))
        })?;
        let entries = parse_archive(&raw)?;
        Ok(BatchResponse {
            exec_id,
            dt_url,
            raw,
            entries,
        })
    }

    pub async fn metrics(&self, node_url: &str) -> Result<BTreeMap<String, f64>> {
        let resp = self.http.get(format!("{node_url}/metrics")).send().await?;
        Ok(parse_exposition(&check(resp).await?.text().await?))
    }

    pub async fn set_faults(&self, node_url: &str, spec: &FaultSpec) -> Result<()> {
        let resp = self
            .http
            .post(format!("{node_url}/v1/debug/faults"))
            .json(spec)
            .send()
            .await?;
        check(resp).await.map(|_| ())
    }

    pub async fn debug_state(&self, node_url: &str) -> Result<DebugState> {
        let resp = self.http.get(format!("{node_url}/v1/debug/state")).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn reload(&self, node_url: &str) -> Result<ClusterMap> {
        let resp = self.http.post(format!("{node_url}/v1/cluster/reload")).send().await?;
        Ok(check(resp).await?.json().await?)
    }
}
