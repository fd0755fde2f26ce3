//! HTTP routes for targets and gateways.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use batchstore_core::config::ClusterConfig;
use batchstore_core::model::{parse_batch_request, ExecutionId, ObjectRef};
use batchstore_core::placement::Role;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::NodeContext;
use crate::dt::{DtEngine, EmitError, Emission, RegisterError};
use crate::pressure::FaultSpec;
use crate::proxy;
use crate::sender::SenderEngine;
use crate::store::{SoftReason, StoreError};

pub fn error_response(code: StatusCode, msg: &str) -> Response {
    (code, Json(json!({ "error": msg }))).into_response()
}

/// Percent-encodes everything outside the unreserved set, keeping `/`.
pub fn encode_path(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~' | b'/') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn object_path_url(endpoint: &str, bucket: &str, objname: &str) -> String {
    format!(
        "http://{endpoint}/v1/objects/{}/{}",
        encode_path(bucket).replace('/', "%2F"),
        encode_path(objname)
    )
}

#[derive(Clone)]
pub struct TargetState {
    pub ctx: Arc<NodeContext>,
    pub dt: Arc<DtEngine>,
    pub sender: Arc<SenderEngine>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DebugState {
    pub node: String,
    pub role: Role,
    pub registry: usize,
    pub tombstones: usize,
    pub sender_active: usize,
    pub bodies_parsed: u64,
    pub pool_connections: usize,
    pub faults: FaultSpec,
}

async fn health() -> &'static str {
    "ok"
}

async fn metrics(State(ctx): State<Arc<NodeContext>>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        ctx.metrics.expose(),
    )
        .into_response()
}

async fn cluster(State(ctx): State<Arc<NodeContext>>) -> Response {
    Json(&*ctx.map()).into_response()
}

/// Re-reads the config file; the map version moves only if membership changed.
async fn reload(State(ctx): State<Arc<NodeContext>>) -> Response {
    let Some(path) = ctx.config_path.clone() else {
        return error_response(StatusCode::CONFLICT, "node was started without a config file");
    };
    let cur = ctx.map();
    let next = ClusterConfig::load(&path).and_then(|c| c.cluster_map(cur.version + 1));
    match next {
        Ok(m) => {
            if m.targets != cur.targets || m.proxies != cur.proxies {
                ctx.set_map(m);
            }
            Json(&*ctx.map()).into_response()
        }
        Err(e) => error_response(StatusCode::BAD_REQUEST, &e.to_string()),
    }
}

async fn set_faults(State(ctx): State<Arc<NodeContext>>, Json(spec): Json<FaultSpec>) -> Response {
    ctx.faults.set(spec);
    StatusCode::NO_CONTENT.into_response()
}

fn debug_state(ctx: &NodeContext, dt: Option<&DtEngine>, sender: Option<&SenderEngine>) -> DebugState {
    let s = dt.map(|d| d.stats()).unwrap_or_default();
    DebugState {
        node: ctx.id.as_str().to_string(),
        role: ctx.role,
        registry: s.registry,
        tombstones: s.tombstones,
        sender_active: sender.map_or(0, |s| s.active()),
        bodies_parsed: ctx.bodies_parsed.load(Ordering::Relaxed),
        pool_connections: ctx.pool.total_connections(),
        faults: ctx.faults.get(),
    }
}

async fn register(State(st): State<TargetState>, body: Bytes) -> Response {
    let req = match parse_batch_request(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, &e.to_string()),
    };
    match st.dt.register(req) {
        Ok(id) => Json(json!({ "exec_id": id })).into_response(),
        Err(RegisterError::Rejected) => error_response(StatusCode::TOO_MANY_REQUESTS, "memory pressure"),
        Err(e @ RegisterError::NotTarget) => error_response(StatusCode::CONFLICT, &e.to_string()),
    }
}

async fn emit(State(st): State<TargetState>, Path(exec): Path<String>) -> Response {
    let Ok(id) = exec.parse::<ExecutionId>() else {
        return error_response(StatusCode::BAD_REQUEST, "bad execution id");
    };
    let exec = match st.dt.attach(id) {
        Ok(e) => e,
        Err(e) => return emit_error(e),
    };
    match st.dt.emit(exec).await {
        Ok(Emission::Buffered(b)) => ([(header::CONTENT_TYPE, "application/x-tar")], b).into_response(),
        Ok(Emission::Stream { first, rest }) => {
            let head = futures::stream::iter(first.into_iter().map(Ok::<_, std::io::Error>));
            let tail = futures::stream::unfold(rest, |mut rx| async move { rx.recv().await.map(|x| (x, rx)) });
            let body = Body::from_stream(futures::StreamExt::chain(head, tail));
            ([(header::CONTENT_TYPE, "application/x-tar")], body).into_response()
        }
        Err(e) => emit_error(e),
    }
}

fn emit_error(e: EmitError) -> Response {
    let code = match e {
        EmitError::Unknown => StatusCode::NOT_FOUND,
        EmitError::AlreadyAttached => StatusCode::CONFLICT,
        EmitError::Aborted(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(code, &e.to_string())
}

#[derive(Debug, Deserialize)]
struct PullQuery {
    exec: String,
    idx: u32,
    bucket: String,
    objname: String,
    archpath: Option<String>,
}

async fn pull(State(st): State<TargetState>, Query(q): Query<PullQuery>) -> Response {
    let Ok(exec) = q.exec.parse::<ExecutionId>() else {
        return error_response(StatusCode::BAD_REQUEST, "bad execution id");
    };
    let r = ObjectRef {
        bucket: q.bucket,
        objname: q.objname,
        archpath: q.archpath,
    };
    let frame = st
        .sender
        .serve_pull(exec, q.idx, r)
        .await;
    let body = batchstore_core::frame::Frame::Delivery(frame).encode();
    ([(header::CONTENT_TYPE, "application/octet-stream")], body).into_response()
}

#[derive(Debug, Deserialize)]
struct ObjQuery {
    archpath: Option<String>,
}

fn store_error(e: StoreError) -> Response {
    match e {
        StoreError::Soft(SoftReason::InvalidName) => error_response(StatusCode::BAD_REQUEST, "invalid_name"),
        StoreError::Soft(r) => error_response(StatusCode::NOT_FOUND, r.as_str()),
        StoreError::Hard(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

async fn target_put(
    State(st): State<TargetState>,
    Path((bucket, objname)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    let Some(store) = st.ctx.store.clone() else {
        return error_response(StatusCode::CONFLICT, "no store");
    };
    let r = ObjectRef::new(bucket, objname);
    match tokio::task::spawn_blocking(move || store.put_object(&r, &body)).await {
        Ok(Ok(size)) => Json(json!({ "size": size })).into_response(),
        Ok(Err(e)) => store_error(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

async fn target_get(
    State(st): State<TargetState>,
    Path((bucket, objname)): Path<(String, String)>,
    Query(q): Query<ObjQuery>,
) -> Response {
    let Some(store) = st.ctx.store.clone() else {
        return error_response(StatusCode::CONFLICT, "no store");
    };
    let r = ObjectRef {
        bucket,
        objname,
        archpath: q.archpath,
    };
    match tokio::task::spawn_blocking(move || store.read_local(&r)).await {
        Ok(Ok(b)) => ([(header::CONTENT_TYPE, "application/octet-stream")], b).into_response(),
        Ok(Err(e)) => store_error(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

async fn target_delete(
    State(st): State<TargetState>,
    Path((bucket, objname)): Path<(String, String)>,
) -> Response {
    let Some(store) = st.ctx.store.clone() else {
        return error_response(StatusCode::CONFLICT, "no store");
    };
    let r = ObjectRef::new(bucket, objname);
    match tokio::task::spawn_blocking(move || store.delete_object(&r)).await {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(e)) => store_error(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

fn common(ctx: &Arc<NodeContext>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/v1/cluster", get(cluster))
        .route("/v1/cluster/reload", post(reload))
        .with_state(ctx.clone())
}

pub fn target_router(st: TargetState) -> Router {
    let max_body = st.ctx.tuning.max_body_bytes;
    let mut r = Router::new()
        .route("/v1/batch", post(register).layer(DefaultBodyLimit::max(max_body)))
        .route("/v1/batch/{exec_id}", get(emit))
        .route("/v1/pull", get(pull))
        .route(
            "/v1/objects/{bucket}/{*objname}",
            put(target_put)
                .get(target_get)
                .delete(target_delete)
                .layer(DefaultBodyLimit::disable()),
        )
        .with_state(st.clone())
        .merge(common(&st.ctx));
    if st.ctx.debug_enabled {
        let s = st.clone();
        r = r
            .route(
                "/v1/debug/faults",
                post(set_faults).with_state(st.ctx.clone()),
            )
            .route(
                "/v1/debug/state",
                get(move || {
                    let s = s.clone();
                    async move { Json(debug_state(&s.ctx, Some(&s.dt), Some(&s.sender))) }
                }),
            );
    }
    r
}

pub fn proxy_router(ctx: Arc<NodeContext>) -> Router {
    let max_body = ctx.tuning.max_body_bytes;
    let mut r = Router::new()
        .route("/v1/batch", get(proxy::get_batch).layer(DefaultBodyLimit::max(max_body)))
        .route(
            "/v1/objects/{bucket}/{*objname}",
            put(proxy::put_object)
                .get(proxy::get_object)
                .delete(proxy::delete_object)
                .layer(DefaultBodyLimit::disable()),
        )
        .with_state(ctx.clone())
        .merge(common(&ctx));
    if ctx.debug_enabled {
        let c = ctx.clone();
        r = r
            .route("/v1/debug/faults", post(set_faults).with_state(ctx.clone()))
            .route(
                "/v1/debug/state",
                get(move || {
                    let c = c.clone();
                    async move { Json(debug_state(&c, None, None)) }
                }),
            );
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_encoding() {
        assert_eq!(encode_path("images/img 1.jpg"), "images/img%201.jpg");
        assert_eq!(encode_path("a?b#c%"), "a%3Fb%23c%25");
        assert_eq!(
            object_path_url("h:1", "b", "dir/x+y"),
            "http://h:1/v1/objects/b/dir/x%2By"
        );
    }
}
