//! Sensor sources: descriptor files, runtime discovery, and open handles.

pub mod builtin;
mod descriptor;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use descriptor::{scan_plugins, PluginDescriptor, PluginSource, ScanReport, FORMAT_VERSION, PLUGIN_EXTENSION};

use crate::error::{EngineError, Result};
use crate::net::{DeviceProfile, HttpConnection, Method};
use crate::types::{StreamElement, TimestampMs};
use crate::wire;

/// Consecutive sample failures after which a handle is marked failed.
pub const DEFAULT_FAILURE_THRESHOLD: u32 = 5;

const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum PluginState {
    Discovered,
    Active,
    Failed { last_error: String },
    Removed,
}

enum Source {
    Builtin(Box<dyn builtin::Generator>),
    External { endpoint: String, conn: Option<HttpConnection> },
}

/// An opened plugin, owned by exactly one sampling loop.
pub struct PluginHandle {
    descriptor: PluginDescriptor,
    state: PluginState,
    source: Option<Source>,
    consecutive_failures: u32,
    failure_threshold: u32,
}

impl std::fmt::Debug for PluginHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginHandle")
            .field("plugin_id", &self.descriptor.plugin_id)
            .field("state", &self.state)
            .finish()
    }
}

impl PluginHandle {
    pub fn discovered(descriptor: PluginDescriptor) -> Self {
        Self {
            descriptor,
            state: PluginState::Discovered,
            source: None,
            consecutive_failures: 0,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
        }
    }

    pub fn with_failure_threshold(mut self, threshold: u32) -> Self {
        self.failure_threshold = threshold.max(1);
        self
    }

    pub fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    pub fn state(&self) -> &PluginState {
        &self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == PluginState::Active
    }

    /// Activates the handle. External sources must answer one probe sample.
    pub async fn open(&mut self) -> Result<()> {
        let source = match &self.descriptor.source {
            PluginSource::Builtin { name, parameters } => Source::Builtin(builtin::create(name, parameters)?),
            PluginSource::External { endpoint } => {
                let mut conn = HttpConnection::open(endpoint, DeviceProfile::unconstrained())
                    .await
                    .map_err(|e| EngineError::plugin_failure(format!("external plugin {endpoint}: {}", e.detail)))?;
                fetch_external(&mut conn, &self.descriptor).await?;
                Source::External {
                    endpoint: endpoint.clone(),
                    conn: Some(conn),
                }
            }
        };
        self.source = Some(source);
        self.state = PluginState::Active;
        self.consecutive_failures = 0;
        Ok(())
    }

    /// Takes one sample stamped `at`.
    pub async fn sample(&mut self, at: TimestampMs) -> Result<StreamElement> {
        if !self.is_active() {
            return Err(EngineError::plugin_failure(format!(
                "plugin `{}` is not active ({:?})",
                self.descriptor.plugin_id, self.state
            )));
        }
        let result = match self.source.as_mut().expect("active handle has a source") {
            Source::Builtin(g) => Ok(StreamElement::new(at, g.sample(at))),
            Source::External { endpoint, conn } => {
                let outcome = async {
                    if conn.as_ref().is_none_or(|c| c.is_closed()) {
                        *conn = Some(HttpConnection::open(endpoint, DeviceProfile::unconstrained()).await?);
                    }
                    let mut e = fetch_external(conn.as_mut().expect("just opened"), &self.descriptor).await?;
                    e.ts = at;
                    Ok::<_, EngineError>(e)
                }
                .await;
                if outcome.is_err() {
                    *conn = None;
                }
                outcome.map_err(|e| EngineError::plugin_failure(format!("external plugin {endpoint}: {}", e.detail)))
            }
        };
        let result = result.and_then(|e| {
            e.conforms_to(&self.descriptor.output)
                .map_err(|err| EngineError::plugin_failure(err.detail))?;
            Ok(e)
        });
        match &result {
            Ok(_) => self.consecutive_failures = 0,
            Err(e) => {
                self.consecutive_failures += 1;
                if self.consecutive_failures >= self.failure_threshold {
                    self.state = PluginState::Failed {
                        last_error: e.detail.clone(),
                    };
                    self.source = None;
                }
            }
        }
        result
    }

    pub fn close(&mut self) {
        self.source = None;
        self.state = PluginState::Removed;
    }
}

async fn fetch_external(conn: &mut HttpConnection, descriptor: &PluginDescriptor) -> Result<StreamElement> {
    let reply = conn.send(Method::Get, "/sample", None, EXTERNAL_TIMEOUT).await?;
    let e: StreamElement = reply.json().map_err(|e| EngineError::plugin_failure(e.detail))?;
    e.conforms_to(&descriptor.output)
        .map_err(|err| EngineError::plugin_failure(err.detail))?;
    Ok(e)
}

/// Opens a descriptor into an active handle.
pub async fn open_plugin(descriptor: PluginDescriptor) -> Result<PluginHandle> {
    let mut h = PluginHandle::discovered(descriptor);
    h.open().await?;
    Ok(h)
}

/// Wire form of one sample served by an external plugin endpoint.
pub fn encode_sample(element: &StreamElement) -> Vec<u8> {
    wire::encode_element(element)
}

/// Descriptors for every builtin generator under its own name, default parameters.
pub fn builtin_catalog() -> Vec<PluginDescriptor> {
    builtin::BUILTIN_NAMES
        .iter()
        .map(|n| PluginDescriptor::builtin(*n, n, []).expect("builtin defaults are valid"))
        .collect()
}

/// The set of plugin descriptors known to a node. Lookups may run concurrently
/// with rescans.
///
/// Resolution order: descriptors from the directory, then ones inserted at
/// runtime, then the builtin catalog.
#[derive(Debug)]
pub struct PluginDirectory {
    dir: Option<PathBuf>,
    from_files: RwLock<BTreeMap<String, PluginDescriptor>>,
    inserted: RwLock<BTreeMap<String, PluginDescriptor>>,
    catalog: BTreeMap<String, PluginDescriptor>,
}

impl PluginDirectory {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            from_files: RwLock::default(),
            inserted: RwLock::default(),
            catalog: builtin_catalog().into_iter().map(|d| (d.plugin_id.clone(), d)).collect(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Re-reads the directory so it reflects added, changed and deleted files.
    /// Handles already opened from earlier descriptors are unaffected.
    pub fn rescan(&self) -> Result<ScanReport> {
        let Some(dir) = &self.dir else {
            return Ok(ScanReport::default());
        };
        let report = scan_plugins(dir)?;
        *self.from_files.write() = report
            .descriptors
            .iter()
            .map(|d| (d.plugin_id.clone(), d.clone()))
            .collect();
        Ok(report)
    }

    pub fn insert(&self, descriptor: PluginDescriptor) {
        self.inserted.write().insert(descriptor.plugin_id.clone(), descriptor);
    }

    pub fn get(&self, plugin_id: &str) -> Option<PluginDescriptor> {
        if let Some(d) = self.from_files.read().get(plugin_id) {
            return Some(d.clone());
        }
        if let Some(d) = self.inserted.read().get(plugin_id) {
            return Some(d.clone());
        }
        self.catalog.get(plugin_id).cloned()
    }

    pub fn list(&self) -> Vec<PluginDescriptor> {
        let mut all = self.catalog.clone();
        all.extend(self.inserted.read().iter().map(|(k, v)| (k.clone(), v.clone())));
        all.extend(self.from_files.read().iter().map(|(k, v)| (k.clone(), v.clone())));
        all.into_values().collect()
    }
}
