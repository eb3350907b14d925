//! Node discovery: nodes register their address and sensor list with a
//! registry and keep the registration alive by refreshing it before its ttl
//! runs out.

use std::collections::BTreeMap;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::error::{EngineError, Result};
use crate::net::{one_shot, DeviceProfile, Method};
use crate::sharing::SensorInfo;
use crate::types::{NodeId, TimestampMs};
use crate::wire;

pub const DEFAULT_TTL_S: u64 = 30;
pub const REFRESH_INTERVAL: Duration = Duration::from_secs(10);
const REGISTRY_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub node_id: NodeId,
    /// `host:port` the node's api listens on.
    pub address: String,
    #[serde(default)]
    pub group_tag: Option<String>,
    pub sensors: Vec<SensorInfo>,
    /// Set by the registry on receipt.
    #[serde(default)]
    pub registered_at: TimestampMs,
    #[serde(default = "default_ttl")]
    pub ttl_s: u64,
}

fn default_ttl() -> u64 {
    DEFAULT_TTL_S
}

/// The registry's table of live registrations.
pub struct Registry {
    clock: SharedClock,
    entries: RwLock<BTreeMap<NodeId, NodeRegistration>>,
}

impl Registry {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            clock,
            entries: RwLock::default(),
        }
    }

    /// Adds or refreshes a registration.
    pub fn register(&self, mut reg: NodeRegistration) -> Result<NodeRegistration> {
        if reg.ttl_s == 0 {
            return Err(EngineError::invalid_query("ttl_s: must be at least 1"));
        }
        if reg.address.rsplit_once(':').is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
            return Err(EngineError::invalid_query(format!("address: `{}` is not host:port", reg.address)));
        }
        reg.registered_at = self.clock.now_ms();
        self.entries.write().insert(reg.node_id.clone(), reg.clone());
        Ok(reg)
    }

    pub fn deregister(&self, node: &NodeId) -> Result<()> {
        self.entries
            .write()
            .remove(node)
            .map(|_| ())
            .ok_or_else(|| EngineError::not_found(format!("node `{node}` is not registered")))
    }

    /// Live registrations in node-id order, optionally only one group.
    pub fn lookup(&self, tag: Option<&str>) -> Vec<NodeRegistration> {
        let now = self.clock.now_ms();
        let mut entries = self.entries.write();
        entries.retain(|_, r| !expired(r, now));
        entries
            .values()
            .filter(|r| tag.is_none_or(|t| r.group_tag.as_deref() == Some(t)))
            .cloned()
            .collect()
    }
}

fn expired(r: &NodeRegistration, now: TimestampMs) -> bool {
    now - r.registered_at >= (r.ttl_s as i64) * 1000
}

/// Registers `reg` with the registry at `registry`.
pub async fn register(registry: &str, reg: &NodeRegistration) -> Result<NodeRegistration> {
    one_shot(
        registry,
        Method::Post,
        "/v1/registry/register",
        Some(wire::encode(reg)),
        DeviceProfile::unconstrained(),
        REGISTRY_TIMEOUT,
    )
    .await?
    .json()
}

/// Live registrations known to the registry at `registry`.
pub async fn lookup(registry: &str, tag: Option<&str>) -> Result<Vec<NodeRegistration>> {
    let path = match tag {
        Some(t) => format!("/v1/registry/nodes?tag={}", encode_query(t)),
        None => "/v1/registry/nodes".to_owned(),
    };
    one_shot(registry, Method::Get, &path, None, DeviceProfile::unconstrained(), REGISTRY_TIMEOUT)
        .await?
        .json()
}

fn encode_query(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}
