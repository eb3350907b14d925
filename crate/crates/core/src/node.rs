//! Running a node: wiring plugins, engine, storage, sharing and the api
//! together behind one listener, plus the standalone registry role.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::api::{self, AcquireRequest, Footprint, NodeMetrics, RegistryState};
use crate::clock::SharedClock;
use crate::engine::Engine;
use crate::error::{EngineError, Result};
use crate::net::{DeviceProfile, HttpServer};
use crate::plugin::PluginDirectory;
use crate::registry::{self, NodeRegistration, Registry};
use crate::sharing::remote::{RemoteRequestInfo, RemoteRequests};
use crate::sharing::{Backoff, SharingService, DEFAULT_BUFFER_CAPACITY, HEARTBEAT};
use crate::storage::HistoryStore;
use crate::types::NodeId;

/// Effective settings of one node process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    pub plugins_dir: Option<PathBuf>,
    pub vsensors_dir: Option<PathBuf>,
    /// Histories are journaled here; in memory only when unset.
    pub data_dir: Option<PathBuf>,
    /// `host:port` of the registry to register with.
    pub registry: Option<String>,
    pub group_tag: Option<String>,
    pub log_level: String,
    /// Runtime worker threads; 0 means one per core.
    pub worker_threads: usize,
    pub connection_cost_us: u64,
    pub request_cost_us: u64,
    pub buffer_capacity: usize,
    pub heartbeat_ms: u64,
    pub ttl_s: u64,
    pub refresh_ms: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            node_id: "node".into(),
            host: "127.0.0.1".into(),
            port: 8470,
            plugins_dir: None,
            vsensors_dir: None,
            data_dir: None,
            registry: None,
            group_tag: None,
            log_level: "info".into(),
            worker_threads: 0,
            connection_cost_us: 0,
            request_cost_us: 0,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            heartbeat_ms: HEARTBEAT.as_millis() as u64,
            ttl_s: registry::DEFAULT_TTL_S,
            refresh_ms: registry::REFRESH_INTERVAL.as_millis() as u64,
        }
    }
}

impl NodeConfig {
    pub fn profile(&self) -> DeviceProfile {
        DeviceProfile {
            connection_cost_us: self.connection_cost_us,
            request_cost_us: self.request_cost_us,
        }
    }

    pub fn validate(&self) -> Result<NodeId> {
        let id: NodeId = self
            .node_id
            .parse()
            .map_err(|_| EngineError::invalid_query(format!("node_id: `{}` is not a valid identifier", self.node_id)))?;
        if self.buffer_capacity == 0 {
            return Err(EngineError::invalid_query("buffer_capacity: must be at least 1"));
        }
        if self.heartbeat_ms == 0 || self.ttl_s == 0 || self.refresh_ms == 0 {
            return Err(EngineError::invalid_query("heartbeat_ms, ttl_s and refresh_ms must be positive"));
        }
        Ok(id)
    }

    fn bind_addr(&self) -> Result<SocketAddr> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|_| EngineError::invalid_query(format!("host: `{}` is not an IP address", self.host)))
    }
}

/// Requests a node's runtime loop acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Offline(Duration),
    Shutdown,
}

/// Everything a node's api handlers reach.
pub struct NodeServices {
    pub node_id: NodeId,
    pub config: NodeConfig,
    pub engine: Arc<Engine>,
    pub sharing: Arc<SharingService>,
    pub remote: Arc<RemoteRequests>,
    address: OnceLock<String>,
    accepted: OnceLock<Arc<AtomicU64>>,
    commands: mpsc::UnboundedSender<Command>,
    started: Instant,
}

impl NodeServices {
    /// `host:port` peers reach this node on.
    pub fn address(&self) -> Option<&str> {
        self.address.get().map(String::as_str)
    }

    pub fn command(&self, c: Command) -> Result<()> {
        self.commands
            .send(c)
            .map_err(|_| EngineError::shutdown("node is stopping"))
    }

    pub fn registration(&self) -> Option<NodeRegistration> {
        Some(NodeRegistration {
            node_id: self.node_id.clone(),
            address: self.address()?.to_owned(),
            group_tag: self.config.group_tag.clone(),
            sensors: self.sharing.sensor_list(),
            registered_at: 0,
            ttl_s: self.config.ttl_s,
        })
    }

    pub fn metrics(&self) -> NodeMetrics {
        NodeMetrics {
            node_id: self.node_id.clone(),
            uptime_ms: self.started.elapsed().as_millis() as u64,
            connections_accepted: self.accepted.get().map_or(0, |a| a.load(Ordering::Relaxed)),
            sensors: self.engine.names().len(),
            subscriptions: self.sharing.list(),
            requests: self.remote.list(),
        }
    }

    pub fn footprint(&self) -> Result<Footprint> {
        let storage = self.engine.storage();
        let names = storage.table_names();
        let mut records = 0;
        let mut disk = 0;
        for n in &names {
            let s = storage.stats(n)?;
            records += s.records as u64;
            disk += s.disk_bytes;
        }
        Ok(Footprint {
            footprint_bytes: storage.footprint(None)?,
            disk_bytes: disk,
            records,
            tables: names.len(),
        })
    }

    /// Looks up the other nodes in the registry and subscribes to
    /// `requests` of their sensors, spread round-robin across nodes.
    pub async fn acquire(&self, a: &AcquireRequest) -> Result<Vec<RemoteRequestInfo>> {
        let reg = self
            .config
            .registry
            .as_deref()
            .ok_or_else(|| EngineError::invalid_query("registry: node has no registry configured"))?;
        let nodes: Vec<NodeRegistration> = registry::lookup(reg, a.tag.as_deref())
            .await?
            .into_iter()
            .filter(|r| r.node_id != self.node_id)
            .collect();
        let targets = assign(&nodes, a.requests)?;
        let mut out = Vec::with_capacity(targets.len());
        for (addr, sensor) in targets {
            out.push(self.remote.acquire(&addr, sensor, a.mode, a.interval_ms).await?);
        }
        Ok(out)
    }
}

/// Picks `requests` (address, sensor) pairs: sensor k of every node before
/// sensor k+1 of any, nodes in id order.
pub fn assign(nodes: &[NodeRegistration], requests: usize) -> Result<Vec<(String, crate::types::SensorName)>> {
    if nodes.is_empty() {
        return Err(EngineError::not_found("no peer nodes registered"));
    }
    let available: usize = nodes.iter().map(|n| n.sensors.len()).sum();
    if requests > available {
        return Err(EngineError::invalid_query(format!(
            "requests: {requests} exceeds the {available} sensors offered by {} node(s)",
            nodes.len()
        )));
    }
    let depth = nodes.iter().map(|n| n.sensors.len()).max().unwrap_or(0);
    let out = (0..depth)
        .flat_map(|k| nodes.iter().filter_map(move |n| n.sensors.get(k).map(|s| (n.address.clone(), s.name.clone()))))
        .take(requests)
        .collect();
    Ok(out)
}

/// A running sensing node.
pub struct Node {
    services: Arc<NodeServices>,
    server: HttpServer,
    commands: mpsc::UnboundedReceiver<Command>,
    registration: Option<JoinHandle<()>>,
}

impl Node {
    pub async fn start(config: NodeConfig, clock: SharedClock) -> Result<Self> {
        let node_id = config.validate()?;
        let bind = config.bind_addr()?;
        let plugins = Arc::new(PluginDirectory::new(config.plugins_dir.clone()));
        for (path, e) in plugins.rescan()?.rejected {
            warn!(path = %path.display(), error = %e, "plugin rejected");
        }
        let storage = Arc::new(match &config.data_dir {
            Some(d) => HistoryStore::persistent(d)?,
            None => HistoryStore::in_memory(),
        });
        let engine = Arc::new(Engine::new(plugins, storage.clone(), clock.clone()));
        if let Some(dir) = &config.vsensors_dir {
            for (path, e) in engine.load_dir(dir).await? {
                warn!(path = %path.display(), error = %e, "virtual sensor rejected");
            }
        }
        let profile = config.profile();
        let sharing = Arc::new(
            SharingService::new(engine.clone(), node_id.as_str(), config.buffer_capacity, profile)
                .with_heartbeat(Duration::from_millis(config.heartbeat_ms)),
        );
        let remote = Arc::new(RemoteRequests::new(node_id.clone(), storage, clock, profile));
        let (tx, rx) = mpsc::unbounded_channel();
        let services = Arc::new(NodeServices {
            node_id,
            config,
            engine,
            sharing,
            remote,
            address: OnceLock::new(),
            accepted: OnceLock::new(),
            commands: tx,
            started: Instant::now(),
        });
        let server = HttpServer::start(bind, api::node_router(services.clone()), profile).await?;
        let local = server.local_addr();
        let advertised = if local.ip().is_unspecified() {
            format!("127.0.0.1:{}", local.port())
        } else {
            local.to_string()
        };
        let _ = services.address.set(advertised.clone());
        let _ = services.accepted.set(server.accepted_counter());
        services.remote.set_callback(advertised);
        let registration = services
            .config
            .registry
            .clone()
            .map(|reg| tokio::spawn(registration_loop(services.clone(), reg)));
        info!(node = %services.node_id, addr = %local, "node listening");
        Ok(Self {
            services,
            server,
            commands: rx,
            registration,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn services(&self) -> &Arc<NodeServices> {
        &self.services
    }

    /// Serves until a shutdown command arrives or `stop` completes, then
    /// shuts down cleanly.
    pub async fn run_until(mut self, stop: impl Future<Output = ()>) {
        tokio::pin!(stop);
        loop {
            tokio::select! {
                _ = &mut stop => break,
                c = self.commands.recv() => match c {
                    Some(Command::Offline(d)) => {
                        info!(period = ?d, "going offline");
                        self.services.remote.go_offline(d);
                        self.server.go_offline(d);
                    }
                    Some(Command::Shutdown) | None => break,
                },
            }
        }
        self.shutdown().await;
    }

    pub async fn shutdown(self) {
        if let Some(t) = &self.registration {
            t.abort();
        }
        let s = &self.services;
        let _ = tokio::time::timeout(Duration::from_secs(2), s.remote.release_all()).await;
        s.sharing.cancel_all();
        s.engine.stop_all().await;
        self.server.shutdown().await;
        debug!(node = %s.node_id, "node stopped");
    }
}

async fn registration_loop(services: Arc<NodeServices>, registry_addr: String) {
    let refresh = Duration::from_millis(services.config.refresh_ms);
    let mut backoff = Backoff::default();
    loop {
        let Some(reg) = services.registration() else { return };
        let delay = match registry::register(&registry_addr, &reg).await {
            Ok(_) => {
                backoff.reset();
                refresh
            }
            Err(e) => {
                let d = Duration::from_millis(backoff.fail()).min(refresh);
                warn!(registry = %registry_addr, error = %e, retry_in = ?d, "registration failed");
                d
            }
        };
        tokio::time::sleep(delay).await;
    }
}

/// A running registry.
pub struct RegistryNode {
    server: HttpServer,
    commands: mpsc::UnboundedReceiver<Command>,
}

impl RegistryNode {
    pub async fn start(bind: SocketAddr, clock: SharedClock) -> Result<Self> {
        let (tx, rx) = mpsc::unbounded_channel();
        let state = Arc::new(RegistryState {
            registry: Registry::new(clock),
            shutdown: tx,
        });
        let server = HttpServer::start(bind, api::registry_router(state), DeviceProfile::unconstrained()).await?;
        info!(addr = %server.local_addr(), "registry listening");
        Ok(Self { server, commands: rx })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub async fn run_until(mut self, stop: impl Future<Output = ()>) {
        tokio::select! {
            _ = stop => {}
            _ = self.commands.recv() => {}
        }
        self.server.shutdown().await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::SensorInfo;

    fn reg(id: &str, sensors: usize) -> NodeRegistration {
        NodeRegistration {
            node_id: id.parse().unwrap(),
            address: format!("{id}:1"),
            group_tag: None,
            sensors: (0..sensors)
                .map(|i| SensorInfo {
                    name: format!("s{i}").parse().unwrap(),
                    output: vec![],
                })
                .collect(),
            registered_at: 0,
            ttl_s: 30,
        }
    }

    #[test]
    fn assignment_is_round_robin() {
        let nodes = [reg("a", 3), reg("b", 3), reg("c", 3)];
        let t = assign(&nodes, 4).unwrap();
        let got: Vec<String> = t.iter().map(|(a, s)| format!("{a}/{s}")).collect();
        assert_eq!(got, ["a:1/s0", "b:1/s0", "c:1/s0", "a:1/s1"]);
        assert_eq!(assign(&nodes, 9).unwrap().len(), 9);
        assert!(assign(&nodes, 10).is_err());
        assert!(assign(&[], 1).is_err());
    }

    #[test]
    fn uneven_nodes_fill_in_order() {
        let t = assign(&[reg("a", 1), reg("b", 3)], 4).unwrap();
        let got: Vec<String> = t.iter().map(|(a, s)| format!("{a}/{s}")).collect();
        assert_eq!(got, ["a:1/s0", "b:1/s0", "b:1/s1", "b:1/s2"]);
    }

    #[test]
    fn config_defaults_validate() {
        let c = NodeConfig::default();
        assert!(c.validate().is_ok());
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<NodeConfig>(&text).unwrap(), c);
        let bad = NodeConfig {
            node_id: "bad id".into(),
            ..NodeConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
