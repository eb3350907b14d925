//! Node settings layered as flags > `MOSDEN_*` environment > config file > defaults.

use std::path::PathBuf;

use clap::Args;
use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use opsense_core::node::NodeConfig;
use serde::Serialize;

pub const ENV_PREFIX: &str = "MOSDEN_";

const KEYS: &[&str] = &[
    "node_id",
    "host",
    "port",
    "plugins_dir",
    "vsensors_dir",
    "data_dir",
    "registry",
    "group_tag",
    "log_level",
    "worker_threads",
    "connection_cost_us",
    "request_cost_us",
    "buffer_capacity",
    "heartbeat_ms",
    "ttl_s",
    "refresh_ms",
];

/// Node flags. Unset flags fall through to the environment, the file and
/// the defaults.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct NodeFlags {
    /// TOML file with node settings
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Node identifier, unique within a deployment
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    /// Address to bind
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    /// Port to bind; 0 picks a free one
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    /// Directory of *.plugin descriptors
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plugins_dir: Option<PathBuf>,
    /// Directory of *.vsensor configs to start with
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vsensors_dir: Option<PathBuf>,
    /// Directory for history journals; memory only when unset
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Registry address (host:port) to register with
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    /// Group tag to register under
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_tag: Option<String>,
    /// error, warn, info, debug or trace
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_level: Option<String>,
    /// Runtime worker threads; 0 means one per core
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker_threads: Option<usize>,
    /// Emulated CPU cost per TCP connection, in microseconds
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connection_cost_us: Option<u64>,
    /// Emulated CPU cost per HTTP request, in microseconds
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_cost_us: Option<u64>,
    /// Elements buffered per subscription before the oldest are dropped
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    /// Longest a restful pull waits for new data, in milliseconds
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heartbeat_ms: Option<u64>,
    /// Registration lifetime in seconds
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttl_s: Option<u64>,
    /// Re-registration period in milliseconds
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refresh_ms: Option<u64>,
}

impl NodeFlags {
    pub fn resolve(&self) -> Result<NodeConfig, String> {
        let mut f = Figment::from(Serialized::defaults(NodeConfig::default()));
        if let Some(path) = &self.config {
            if !path.exists() {
                return Err(format!("config: {} does not exist", path.display()));
            }
            f = f.merge(Toml::file(path));
        }
        f.merge(Env::prefixed(ENV_PREFIX).only(KEYS))
            .merge(Serialized::defaults(self))
            .extract()
            .map_err(|e| format!("config: {e}"))
    }
}
