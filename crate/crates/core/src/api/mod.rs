//! HTTP surface of a node and of the registry.
//!
//! Every route lives under `/v1`. Bodies are JSON; errors come back as
//! `{"error":{"kind":..,"detail":..}}` with the status given by
//! [`ErrorKind::http_status`](crate::error::ErrorKind::http_status).

mod client;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Extension, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use client::{remote_pull, PeerClient};

use crate::engine::VirtualSensorConfig;
use crate::error::{EngineError, ErrorBody, Result};
use crate::net::ConnId;
use crate::node::{Command, NodeServices};
use crate::registry::{NodeRegistration, Registry};
use crate::sharing::remote::RemoteRequestInfo;
use crate::sharing::{Mode, PushDelivery, QueryRequest, SubscribeRequest};
use crate::types::{NodeId, RequestId, SensorName, SubscriptionId, TimestampMs};
use crate::wire;

/// An [`EngineError`] rendered as an HTTP response.
pub struct ApiError(pub EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.kind.http_status()).expect("mapped statuses are valid");
        reply(status, &ErrorBody { error: self.0 })
    }
}

type ApiResult = std::result::Result<Response, ApiError>;

fn reply<T: Serialize>(status: StatusCode, body: &T) -> Response {
    (status, [(axum::http::header::CONTENT_TYPE, "application/json")], wire::encode(body)).into_response()
}

fn ok<T: Serialize>(body: &T) -> ApiResult {
    Ok(reply(StatusCode::OK, body))
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T> {
    wire::decode(bytes)
}

fn param<T: std::str::FromStr>(raw: &str, what: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| EngineError::invalid_query(format!("{what}: `{raw}` is not valid")))
}

fn opt_query<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    q.get(key).map(|v| param(v, key)).transpose()
}

fn req_query<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<T> {
    opt_query(q, key)?.ok_or_else(|| EngineError::invalid_query(format!("{key}: required")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub node_id: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquireRequest {
    pub requests: usize,
    pub mode: Mode,
    pub interval_ms: u64,
    #[serde(default)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequestSpec {
    pub owner: String,
    pub sensor: SensorName,
    pub mode: Mode,
    pub interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRequest {
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub footprint_bytes: u64,
    pub disk_bytes: u64,
    pub records: u64,
    pub tables: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescanReply {
    pub plugins: Vec<String>,
    pub rejected: Vec<(String, EngineError)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node_id: NodeId,
    pub uptime_ms: u64,
    pub connections_accepted: u64,
    pub sensors: usize,
    pub subscriptions: Vec<crate::sharing::SubscriptionInfo>,
    pub requests: Vec<RemoteRequestInfo>,
}

/// Routes of a sensing node.
pub fn node_router(node: Arc<NodeServices>) -> Router {
    Router::new()
        .route("/v1/health", get(node_health))
        .route("/v1/sensors", get(list_sensors))
        .route("/v1/sensors/{name}/latest", get(latest))
        .route("/v1/sensors/{name}/range", get(range))
        .route("/v1/query", post(query))
        .route("/v1/subscriptions", post(subscribe).get(list_subscriptions))
        .route("/v1/subscriptions/{id}", delete(cancel).get(get_subscription))
        .route("/v1/subscriptions/{id}/stream", get(stream))
        .route("/v1/push/{id}", post(push))
        .route("/v1/vsensors", get(list_vsensors).post(create_vsensor))
        .route("/v1/vsensors/{name}", delete(remove_vsensor).put(update_vsensor).get(get_vsensor))
        .route("/v1/plugins", get(list_plugins))
        .route("/v1/plugins/rescan", post(rescan_plugins))
        .route("/v1/requests", get(list_requests).post(create_request))
        .route("/v1/requests/{id}", delete(release_request))
        .route("/v1/metrics", get(metrics))
        .route("/v1/metrics/roundtrips", get(round_trips))
        .route("/v1/storage/footprint", get(footprint))
        .route("/v1/control/acquire", post(acquire))
        .route("/v1/control/offline", post(offline))
        .route("/v1/control/shutdown", post(node_shutdown))
        .with_state(node)
}

async fn node_health(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&Health {
        node_id: n.node_id.to_string(),
        role: "node".into(),
    })
}

async fn list_sensors(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.sharing.sensor_list())
}

async fn latest(State(n): State<Arc<NodeServices>>, Path(name): Path<String>) -> ApiResult {
    let name: SensorName = param(&name, "name")?;
    match n.engine.storage().latest(&name)? {
        Some(e) => ok(&e),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn range(
    State(n): State<Arc<NodeServices>>,
    Path(name): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let name: SensorName = param(&name, "name")?;
    let from: TimestampMs = req_query(&q, "from")?;
    let to: TimestampMs = req_query(&q, "to")?;
    ok(&n.engine.storage().range(&name, from, to)?)
}

async fn query(State(n): State<Arc<NodeServices>>, b: Bytes) -> ApiResult {
    let q: QueryRequest = body(&b)?;
    ok(&n.sharing.resolve_query(&q)?)
}

async fn subscribe(State(n): State<Arc<NodeServices>>, b: Bytes) -> ApiResult {
    let req: SubscribeRequest = body(&b)?;
    Ok(reply(StatusCode::CREATED, &n.sharing.subscribe(req)?))
}

async fn list_subscriptions(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.sharing.list())
}

async fn get_subscription(State(n): State<Arc<NodeServices>>, Path(id): Path<String>) -> ApiResult {
    let id: SubscriptionId = param(&id, "id")?;
    ok(&n.sharing.get(&id)?.info())
}

async fn cancel(State(n): State<Arc<NodeServices>>, Path(id): Path<String>) -> ApiResult {
    let id: SubscriptionId = param(&id, "id")?;
    n.sharing.cancel(&id)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn stream(
    State(n): State<Arc<NodeServices>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    conn: Option<Extension<ConnId>>,
) -> ApiResult {
    let id: SubscriptionId = param(&id, "id")?;
    let after: Option<TimestampMs> = opt_query(&q, "after")?;
    ok(&n.sharing.pull(&id, after, conn.map(|c| c.0)).await?)
}

async fn push(State(n): State<Arc<NodeServices>>, Path(id): Path<String>, b: Bytes) -> ApiResult {
    let id: SubscriptionId = param(&id, "id")?;
    let d: PushDelivery = body(&b)?;
    if d.subscription_id != id {
        return Err(EngineError::invalid_query("subscription_id: does not match the path").into());
    }
    ok(&Accepted {
        accepted: n.remote.receive_push(d)?,
    })
}

async fn list_vsensors(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.engine.list())
}

async fn get_vsensor(State(n): State<Arc<NodeServices>>, Path(name): Path<String>) -> ApiResult {
    let name: SensorName = param(&name, "name")?;
    ok(&n.engine.state(&name)?)
}

async fn create_vsensor(State(n): State<Arc<NodeServices>>, b: Bytes) -> ApiResult {
    let c: VirtualSensorConfig = body(&b)?;
    c.check_static()?;
    Ok(reply(StatusCode::CREATED, &n.engine.instantiate(c).await?))
}

async fn update_vsensor(State(n): State<Arc<NodeServices>>, Path(name): Path<String>, b: Bytes) -> ApiResult {
    let name: SensorName = param(&name, "name")?;
    let c: VirtualSensorConfig = body(&b)?;
    c.check_static()?;
    ok(&n.engine.update(&name, c).await?)
}

async fn remove_vsensor(State(n): State<Arc<NodeServices>>, Path(name): Path<String>) -> ApiResult {
    let name: SensorName = param(&name, "name")?;
    n.engine.remove(&name).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn list_plugins(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.engine.plugins().list())
}

async fn rescan_plugins(State(n): State<Arc<NodeServices>>) -> ApiResult {
    let report = n.engine.plugins().rescan()?;
    ok(&RescanReply {
        plugins: report.descriptors.into_iter().map(|d| d.plugin_id).collect(),
        rejected: report
            .rejected
            .into_iter()
            .map(|(p, e)| (p.display().to_string(), e))
            .collect(),
    })
}

async fn list_requests(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.remote.list())
}

async fn create_request(State(n): State<Arc<NodeServices>>, b: Bytes) -> ApiResult {
    let s: RemoteRequestSpec = body(&b)?;
    Ok(reply(
        StatusCode::CREATED,
        &n.remote.acquire(&s.owner, s.sensor, s.mode, s.interval_ms).await?,
    ))
}

async fn release_request(State(n): State<Arc<NodeServices>>, Path(id): Path<String>) -> ApiResult {
    let id: RequestId = param(&id, "id")?;
    n.remote.release(&id).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn metrics(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.metrics())
}

async fn round_trips(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.remote.round_trips())
}

async fn footprint(State(n): State<Arc<NodeServices>>) -> ApiResult {
    ok(&n.footprint()?)
}

async fn acquire(State(n): State<Arc<NodeServices>>, b: Bytes) -> ApiResult {
    let a: AcquireRequest = body(&b)?;
    Ok(reply(StatusCode::CREATED, &n.acquire(&a).await?))
}

async fn offline(State(n): State<Arc<NodeServices>>, b: Bytes) -> ApiResult {
    let o: OfflineRequest = body(&b)?;
    n.command(Command::Offline(Duration::from_millis(o.duration_ms)))?;
    Ok(StatusCode::ACCEPTED.into_response())
}

async fn node_shutdown(State(n): State<Arc<NodeServices>>) -> ApiResult {
    n.command(Command::Shutdown)?;
    Ok(StatusCode::ACCEPTED.into_response())
}

/// State behind the registry routes.
pub struct RegistryState {
    pub registry: Registry,
    pub shutdown: tokio::sync::mpsc::UnboundedSender<Command>,
}

/// Routes of the registry role.
pub fn registry_router(state: Arc<RegistryState>) -> Router {
    Router::new()
        .route("/v1/health", get(registry_health))
        .route("/v1/registry/register", post(register))
        .route("/v1/registry/nodes", get(nodes))
        .route("/v1/registry/nodes/{id}", delete(deregister))
        .route("/v1/control/shutdown", post(registry_shutdown))
        .with_state(state)
}

async fn registry_health() -> ApiResult {
    ok(&Health {
        node_id: "registry".into(),
        role: "registry".into(),
    })
}

async fn register(State(r): State<Arc<RegistryState>>, b: Bytes) -> ApiResult {
    let reg: NodeRegistration = body(&b)?;
    ok(&r.registry.register(reg)?)
}

async fn nodes(State(r): State<Arc<RegistryState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    ok(&r.registry.lookup(q.get("tag").map(String::as_str)))
}

async fn deregister(State(r): State<Arc<RegistryState>>, Path(id): Path<String>) -> ApiResult {
    let id: NodeId = param(&id, "id")?;
    r.registry.deregister(&id)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn registry_shutdown(State(r): State<Arc<RegistryState>>) -> ApiResult {
    r.shutdown
        .send(Command::Shutdown)
        .map_err(|_| EngineError::shutdown("already stopping"))?;
    Ok(StatusCode::ACCEPTED.into_response())
}
