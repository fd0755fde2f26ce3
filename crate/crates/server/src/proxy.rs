//! Stateless gateway: picks a DT, registers the request there, broadcasts
//! activation to the other targets and redirects the client.

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, RawQuery, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use batchstore_core::frame::Frame;
use batchstore_core::model::{parse_batch_request, ExecutionId, ObjectRef};
use batchstore_core::placement::{owner_of, select_dt_colocated, select_dt_default, NodeInfo};
use serde::Deserialize;

use crate::context::NodeContext;
use crate::http::{error_response, object_path_url};

const REGISTER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Deserialize)]
pub struct BatchQuery {
    coloc: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Registered {
    exec_id: ExecutionId,
}

/// Cheap check for a `"coloc"` key so bodies without one are never parsed.
fn mentions_coloc(body: &[u8]) -> bool {
    body.windows(7).any(|w| w == b"\"coloc\"")
}

pub async fn get_batch(
    State(ctx): State<Arc<NodeContext>>,
    Query(q): Query<BatchQuery>,
    body: Bytes,
) -> Response {
    let map = ctx.map();
    let coloc_q = match q.coloc.as_deref().map(str::parse::<u64>) {
        None => None,
        Some(Ok(n)) => Some(n),
        Some(Err(_)) => return error_response(StatusCode::BAD_REQUEST, "coloc must be a non-negative integer"),
    };
    let parse = || {
        ctx.bodies_parsed.fetch_add(1, Ordering::Relaxed);
        parse_batch_request(&body)
    };
    let dt: NodeInfo = match coloc_q {
        Some(0) => map.target(select_dt_default(&map, ExecutionId::random())).cloned(),
        Some(_) => match parse() {
            Ok(req) => map.target(select_dt_colocated(&map, &req.entries)).cloned(),
            Err(e) => return error_response(StatusCode::BAD_REQUEST, &e.to_string()),
        },
        None if mentions_coloc(&body) => match parse() {
            Ok(req) if req.wants_colocation() => map.target(select_dt_colocated(&map, &req.entries)).cloned(),
            Ok(_) => map.target(select_dt_default(&map, ExecutionId::random())).cloned(),
            Err(e) => return error_response(StatusCode::BAD_REQUEST, &e.to_string()),
        },
        None => map.target(select_dt_default(&map, ExecutionId::random())).cloned(),
    }
    .expect("selected DT is a target of the map");

    // phase 1: registration at the DT
    let resp = ctx
        .http
        .post(format!("http://{}/v1/batch", dt.endpoint))
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.clone())
        .timeout(REGISTER_TIMEOUT)
        .send()
        .await;
    let resp = match resp {
        Ok(r) => r,
        Err(e) => {
            return error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                &format!("designated target {} unreachable: {e}", dt.id.as_str()),
            )
        }
    };
    let status = resp.status();
    if !status.is_success() {
        let code = StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
        let text = resp.text().await.unwrap_or_default();
        return (code, [(header::CONTENT_TYPE, "application/json")], text).into_response();
    }
    let exec_id = match resp.json::<Registered>().await {
        Ok(r) => r.exec_id,
        Err(e) => return error_response(StatusCode::BAD_GATEWAY, &format!("bad registration reply: {e}")),
    };

    // phase 2: activation to every other target, best effort
    let (head, payload) = Frame::encode_activation_raw(exec_id, &dt.id, body);
    let timeout = ctx.tuning.activation_timeout();
    let sends = map.targets.iter().filter(|t| t.id != dt.id).map(|t| {
        let (ctx, head, payload) = (&ctx, head.clone(), payload.clone());
        async move {
            match tokio::time::timeout(timeout, ctx.pool.send_parts(&t.peer, head, payload)).await {
                Ok(Ok(())) => {}
                Ok(Err(e)) => tracing::warn!(target = t.id.as_str(), error = %e, "activation failed"),
                Err(_) => tracing::warn!(target = t.id.as_str(), "activation timed out"),
            }
        }
    });
    futures::future::join_all(sends).await;

    // phase 3: redirect
    let location = format!("http://{}/v1/batch/{exec_id}", dt.endpoint);
    (
        StatusCode::TEMPORARY_REDIRECT,
        [
            (header::LOCATION, location),
            (header::HeaderName::from_static("x-exec-id"), exec_id.to_string()),
        ],
    )
        .into_response()
}

fn owner_for(ctx: &NodeContext, bucket: &str, objname: &str) -> NodeInfo {
    let map = ctx.map();
    let owner = owner_of(&map, &ObjectRef::new(bucket, objname)).clone();
    map.target(&owner).cloned().expect("owner is a target")
}

pub async fn put_object(
    State(ctx): State<Arc<NodeContext>>,
    Path((bucket, objname)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    let owner = owner_for(&ctx, &bucket, &objname);
    let url = object_path_url(&owner.endpoint, &bucket, &objname);
    match ctx.http.put(url).body(body).send().await {
        Ok(r) => {
            let code = StatusCode::from_u16(r.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
            let text = r.text().await.unwrap_or_default();
            (code, [(header::CONTENT_TYPE, "application/json")], text).into_response()
        }
        Err(e) => error_response(StatusCode::SERVICE_UNAVAILABLE, &format!("owner unreachable: {e}")),
    }
}

pub async fn delete_object(
    State(ctx): State<Arc<NodeContext>>,
    Path((bucket, objname)): Path<(String, String)>,
) -> Response {
    let owner = owner_for(&ctx, &bucket, &objname);
    let url = object_path_url(&owner.endpoint, &bucket, &objname);
    match ctx.http.delete(url).send().await {
        Ok(r) => StatusCode::from_u16(r.status().as_u16())
            .unwrap_or(StatusCode::BAD_GATEWAY)
            .into_response(),
        Err(e) => error_response(StatusCode::SERVICE_UNAVAILABLE, &format!("owner unreachable: {e}")),
    }
}

/// Per-object reads are redirected to the owning target.
pub async fn get_object(
    State(ctx): State<Arc<NodeContext>>,
    Path((bucket, objname)): Path<(String, String)>,
    RawQuery(query): RawQuery,
) -> Response {
    let owner = owner_for(&ctx, &bucket, &objname);
    let mut location = object_path_url(&owner.endpoint, &bucket, &objname);
    if let Some(q) = query {
        location.push('?');
        location.push_str(&q);
    }
    let mut h = HeaderMap::new();
    h.insert(header::LOCATION, location.parse().expect("valid location"));
    (StatusCode::TEMPORARY_REDIRECT, h).into_response()
}
