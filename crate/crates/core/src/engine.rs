//! Virtual sensors: configuration, lifecycle and the per-sensor sampling loop.
//!
//! Each running sensor owns one task that ticks at a fixed rate anchored to
//! its start (tick `k` fires at `start + k·interval`; missed ticks are skipped,
//! never bunched). A tick samples the plugin, feeds the record through the
//! processor chain and appends the chain output to the sensor's history table.
//!
//! Lifecycle operations on one sensor are serialized. An update stops the old
//! loop before starting the new one and bumps a generation counter, so a tick
//! from the old generation can never write.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;
use tracing::{debug, warn};

use crate::clock::SharedClock;
use crate::error::{EngineError, Result};
use crate::plugin::{PluginDescriptor, PluginDirectory, PluginHandle, PluginState, DEFAULT_FAILURE_THRESHOLD};
use crate::processor::{Chain, ChainState, ProcessorSpec};
use crate::storage::{HistoryStore, TableStatus, DEFAULT_HISTORY_SIZE};
use crate::types::{FieldSpec, SensorName, StreamElement};

pub const VSENSOR_EXTENSION: &str = "vsensor";

fn default_format_version() -> u32 {
    crate::plugin::FORMAT_VERSION
}

fn default_history_size() -> usize {
    DEFAULT_HISTORY_SIZE
}

/// Binds a plugin to a processor chain, a sampling interval and a history size.
/// Stored one per `*.vsensor` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualSensorConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub name: SensorName,
    pub plugin_id: String,
    pub sampling_interval_ms: u64,
    #[serde(default)]
    pub processors: Vec<ProcessorSpec>,
    #[serde(default = "default_history_size")]
    pub history_size: usize,
    /// Filled from the chain when omitted; must match it when given.
    #[serde(default)]
    pub output: Vec<FieldSpec>,
}

impl VirtualSensorConfig {
    pub fn new(name: SensorName, plugin_id: impl Into<String>, sampling_interval_ms: u64) -> Self {
        Self {
            format_version: default_format_version(),
            name,
            plugin_id: plugin_id.into(),
            sampling_interval_ms,
            processors: Vec::new(),
            history_size: DEFAULT_HISTORY_SIZE,
            output: Vec::new(),
        }
    }

    pub fn with_processors(mut self, processors: Vec<ProcessorSpec>) -> Self {
        self.processors = processors;
        self
    }

    pub fn with_history(mut self, history_size: usize) -> Self {
        self.history_size = history_size;
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| EngineError::invalid_descriptor(e.message().to_owned()))?;
        c.check_static()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::invalid_descriptor(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| EngineError::new(e.kind, format!("{}: {}", path.display(), e.detail)))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that need no plugin: version, interval, history size.
    pub fn check_static(&self) -> Result<()> {
        if self.format_version != crate::plugin::FORMAT_VERSION {
            return Err(EngineError::invalid_descriptor(format!(
                "format_version: unsupported version {}",
                self.format_version
            )));
        }
        if self.sampling_interval_ms == 0 {
            return Err(EngineError::invalid_descriptor("sampling_interval_ms: must be at least 1"));
        }
        if self.history_size == 0 {
            return Err(EngineError::invalid_descriptor("history_size: must be at least 1"));
        }
        Ok(())
    }

    /// Binds the config to its plugin: checks the interval against the
    /// plugin's minimum, builds the chain and settles the output structure.
    pub fn resolve(&mut self, plugin: &PluginDescriptor) -> Result<Chain> {
        self.check_static()?;
        if self.sampling_interval_ms < plugin.min_sampling_interval_ms {
            return Err(EngineError::invalid_descriptor(format!(
                "sampling_interval_ms: {} is below plugin minimum {}",
                self.sampling_interval_ms, plugin.min_sampling_interval_ms
            )));
        }
        let chain = Chain::new(&self.processors, &plugin.output)
            .map_err(|e| EngineError::invalid_descriptor(format!("processors: {}", e.detail)))?;
        if self.output.is_empty() {
            self.output = chain.output().to_vec();
        } else if self.output != chain.output() {
            return Err(EngineError::invalid_descriptor(
                "output: does not match the structure produced by the processor chain",
            ));
        }
        Ok(chain)
    }
}

/// Reads every `*.vsensor` file in `dir`, in file-name order.
pub fn scan_vsensors(dir: &Path) -> Result<(Vec<VirtualSensorConfig>, Vec<(PathBuf, EngineError)>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EngineError::not_found(format!("vsensor directory {}", dir.display())),
        _ => EngineError::invalid_descriptor(format!("{}: {e}", dir.display())),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VSENSOR_EXTENSION))
        .collect();
    paths.sort();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for p in paths {
        match VirtualSensorConfig::load(&p) {
            Ok(c) => ok.push(c),
            Err(e) => bad.push((p, e)),
        }
    }
    Ok((ok, bad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Instantiated,
    Running,
    Updating,
    Removed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorCounters {
    pub samples: u64,
    pub processor_drops: u64,
    pub plugin_failures: u64,
}

/// Point-in-time view of one virtual sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSensorState {
    pub config: VirtualSensorConfig,
    pub lifecycle: Lifecycle,
    pub last_element: Option<StreamElement>,
    pub counters: SensorCounters,
    pub plugin: PluginState,
}

#[derive(Default)]
struct Counters {
    samples: AtomicU64,
    processor_drops: AtomicU64,
    plugin_failures: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> SensorCounters {
        SensorCounters {
            samples: self.samples.load(Ordering::Relaxed),
            processor_drops: self.processor_drops.load(Ordering::Relaxed),
            plugin_failures: self.plugin_failures.load(Ordering::Relaxed),
        }
    }

    fn reset(&self) {
        self.samples.store(0, Ordering::Relaxed);
        self.processor_drops.store(0, Ordering::Relaxed);
        self.plugin_failures.store(0, Ordering::Relaxed);
    }
}

struct Shared {
    name: SensorName,
    config: RwLock<VirtualSensorConfig>,
    lifecycle: RwLock<Lifecycle>,
    generation: AtomicU64,
    last: RwLock<Option<StreamElement>>,
    plugin: RwLock<PluginState>,
    counters: Counters,
}

impl Shared {
    fn snapshot(&self) -> VirtualSensorState {
        VirtualSensorState {
            config: self.config.read().clone(),
            lifecycle: *self.lifecycle.read(),
            last_element: self.last.read().clone(),
            counters: self.counters.snapshot(),
            plugin: self.plugin.read().clone(),
        }
    }
}

struct Slot {
    shared: Arc<Shared>,
    // Held across a lifecycle op; serializes ops on one sensor.
    task: tokio::sync::Mutex<Option<JoinHandle<()>>>,
}

/// Owns the virtual sensors of one node.
pub struct Engine {
    plugins: Arc<PluginDirectory>,
    storage: Arc<HistoryStore>,
    clock: SharedClock,
    failure_threshold: u32,
    sensors: Mutex<BTreeMap<SensorName, Arc<Slot>>>,
}

impl Engine {
    pub fn new(plugins: Arc<PluginDirectory>, storage: Arc<HistoryStore>, clock: SharedClock) -> Self {
        Self {
            plugins,
            storage,
            clock,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            sensors: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_failure_threshold(mut self, threshold: u32) -> Self {
        self.failure_threshold = threshold.max(1);
        self
    }

    pub fn plugins(&self) -> &Arc<PluginDirectory> {
        &self.plugins
    }

    pub fn storage(&self) -> &Arc<HistoryStore> {
        &self.storage
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    async fn prepare(&self, config: &mut VirtualSensorConfig) -> Result<(ChainState, PluginHandle)> {
        let descriptor = self
            .plugins
            .get(&config.plugin_id)
            .ok_or_else(|| EngineError::plugin_failure(format!("unknown plugin `{}`", config.plugin_id)))?;
        let chain = config.resolve(&descriptor)?;
        let mut handle = PluginHandle::discovered(descriptor).with_failure_threshold(self.failure_threshold);
        handle.open().await?;
        Ok((chain.start(), handle))
    }

    /// Starts a new virtual sensor.
    pub async fn instantiate(&self, mut config: VirtualSensorConfig) -> Result<VirtualSensorState> {
        let name = config.name.clone();
        let slot = Arc::new(Slot {
            shared: Arc::new(Shared {
                name: name.clone(),
                config: RwLock::new(config.clone()),
                lifecycle: RwLock::new(Lifecycle::Instantiated),
                generation: AtomicU64::new(0),
                last: RwLock::new(None),
                plugin: RwLock::new(PluginState::Discovered),
                counters: Counters::default(),
            }),
            task: tokio::sync::Mutex::new(None),
        });
        // Reserve the name first so concurrent instantiations conflict.
        let mut task = slot.task.try_lock().expect("fresh slot");
        {
            let mut sensors = self.sensors.lock();
            if sensors.contains_key(&name) {
                return Err(EngineError::conflict(format!("virtual sensor `{name}` already exists")));
            }
            sensors.insert(name.clone(), slot.clone());
        }
        let prepared = match self.prepare(&mut config).await {
            Ok(p) => p,
            Err(e) => {
                self.sensors.lock().remove(&name);
                return Err(e);
            }
        };
        if let Err(e) = self.storage.ensure_table(&name, &config.output, config.history_size) {
            self.sensors.lock().remove(&name);
            return Err(e);
        }
        *slot.shared.config.write() = config.clone();
        *slot.shared.last.write() = self.storage.latest(&name)?;
        *task = Some(self.spawn_loop(&slot.shared, config, prepared));
        debug!(sensor = %name, "instantiated");
        Ok(slot.shared.snapshot())
    }

    /// Restarts a sensor under a new configuration. History survives when the
    /// output structure is unchanged; otherwise history and counters reset.
    pub async fn update(&self, name: &SensorName, mut new_config: VirtualSensorConfig) -> Result<VirtualSensorState> {
        let slot = self.slot(name)?;
        let mut task = slot.task.lock().await;
        if *slot.shared.lifecycle.read() == Lifecycle::Removed {
            return Err(EngineError::not_found(format!("virtual sensor `{name}` was removed")));
        }
        if &new_config.name != name {
            return Err(EngineError::invalid_descriptor(format!(
                "name: update of `{name}` cannot rename to `{}`",
                new_config.name
            )));
        }
        let prepared = match self.prepare(&mut new_config).await {
            Ok(p) => p,
            Err(e) if e.kind == crate::error::ErrorKind::PluginFailure => return Err(e),
            Err(e) => return Err(EngineError::invalid_descriptor(e.detail)),
        };
        *slot.shared.lifecycle.write() = Lifecycle::Updating;
        Self::stop(&slot.shared, &mut task).await;
        let status = self
            .storage
            .ensure_table(name, &new_config.output, new_config.history_size)?;
        if status == TableStatus::Reset {
            slot.shared.counters.reset();
            *slot.shared.last.write() = None;
        }
        *slot.shared.config.write() = new_config.clone();
        *task = Some(self.spawn_loop(&slot.shared, new_config, prepared));
        Ok(slot.shared.snapshot())
    }

    /// Stops a sensor. Its history table stays queryable until dropped.
    pub async fn remove(&self, name: &SensorName) -> Result<()> {
        let slot = self.slot(name)?;
        let mut task = slot.task.lock().await;
        if *slot.shared.lifecycle.read() == Lifecycle::Removed {
            return Err(EngineError::not_found(format!("virtual sensor `{name}` was removed")));
        }
        Self::stop(&slot.shared, &mut task).await;
        *slot.shared.lifecycle.write() = Lifecycle::Removed;
        *slot.shared.plugin.write() = PluginState::Removed;
        self.sensors.lock().remove(name);
        debug!(sensor = %name, "removed");
        Ok(())
    }

    /// Stops every sensor; used at node shutdown.
    pub async fn stop_all(&self) {
        let slots: Vec<_> = self.sensors.lock().values().cloned().collect();
        for slot in slots {
            let mut task = slot.task.lock().await;
            Self::stop(&slot.shared, &mut task).await;
        }
    }

    pub fn state(&self, name: &SensorName) -> Result<VirtualSensorState> {
        Ok(self.slot(name)?.shared.snapshot())
    }

    /// Snapshots of every live sensor, by name.
    pub fn list(&self) -> Vec<VirtualSensorState> {
        let names: Vec<SensorName> = self.sensors.lock().keys().cloned().collect();
        names.iter().filter_map(|n| self.state(n).ok()).collect()
    }

    pub fn names(&self) -> Vec<SensorName> {
        self.sensors.lock().keys().cloned().collect()
    }

    /// Instantiates every valid `*.vsensor` file in `dir`; returns the failures.
    pub async fn load_dir(&self, dir: &Path) -> Result<Vec<(PathBuf, EngineError)>> {
        let (configs, mut failures) = scan_vsensors(dir)?;
        for c in configs {
            let path = dir.join(format!("{}.{VSENSOR_EXTENSION}", c.name));
            if let Err(e) = self.instantiate(c).await {
                warn!(path = %path.display(), error = %e, "virtual sensor not started");
                failures.push((path, e));
            }
        }
        Ok(failures)
    }

    fn slot(&self, name: &SensorName) -> Result<Arc<Slot>> {
        self.sensors
            .lock()
            .get(name)
            .cloned()
            .ok_or_else(|| EngineError::not_found(format!("no virtual sensor `{name}`")))
    }

    async fn stop(shared: &Shared, task: &mut Option<JoinHandle<()>>) {
        shared.generation.fetch_add(1, Ordering::SeqCst);
        if let Some(task) = task.take() {
            task.abort();
            let _ = task.await;
        }
    }

    fn spawn_loop(
        &self,
        shared: &Arc<Shared>,
        config: VirtualSensorConfig,
        (chain, handle): (ChainState, PluginHandle),
    ) -> JoinHandle<()> {
        let generation = shared.generation.load(Ordering::SeqCst);
        *shared.lifecycle.write() = Lifecycle::Running;
        *shared.plugin.write() = handle.state().clone();
        tokio::spawn(sampling_loop(
            shared.clone(),
            generation,
            handle,
            chain,
            self.storage.clone(),
            self.clock.clone(),
            Duration::from_millis(config.sampling_interval_ms),
        ))
    }
}

async fn sampling_loop(
    shared: Arc<Shared>,
    generation: u64,
    mut handle: PluginHandle,
    mut chain: ChainState,
    storage: Arc<HistoryStore>,
    clock: SharedClock,
    period: Duration,
) {
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let mut last_ts = shared.last.read().as_ref().map_or(i64::MIN, |e| e.ts);
    loop {
        ticker.tick().await;
        if shared.generation.load(Ordering::SeqCst) != generation {
            break;
        }
        if !handle.is_active() {
            continue;
        }
        let at = clock.now_ms().max(last_ts);
        match handle.sample(at).await {
            Ok(raw) => {
                shared.counters.samples.fetch_add(1, Ordering::Relaxed);
                match chain.push(raw) {
                    Ok(Some(out)) => {
                        if shared.generation.load(Ordering::SeqCst) != generation {
                            break;
                        }
                        last_ts = out.ts;
                        match storage.append(&shared.name, out.clone()) {
                            Ok(()) => *shared.last.write() = Some(out),
                            Err(e) => warn!(sensor = %shared.name, error = %e, "append failed"),
                        }
                    }
                    Ok(None) | Err(_) => {
                        shared.counters.processor_drops.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            Err(e) => {
                shared.counters.plugin_failures.fetch_add(1, Ordering::Relaxed);
                debug!(sensor = %shared.name, error = %e, "sample failed");
            }
        }
        *shared.plugin.write() = handle.state().clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;
    use crate::types::Value;

    fn engine() -> Engine {
        Engine::new(
            Arc::new(PluginDirectory::new(None)),
            Arc::new(HistoryStore::in_memory()),
            crate::clock::system(),
        )
    }

    fn name(s: &str) -> SensorName {
        s.parse().unwrap()
    }

    #[test]
    fn config_round_trips_and_fills_output() {
        let text = r#"
name = "mic"
plugin_id = "microphone_sim"
sampling_interval_ms = 20
history_size = 50

[[processors]]
kind = "noise_level_db"
reference = 1.0
window = 4
"#;
        let mut c = VirtualSensorConfig::parse(text).unwrap();
        assert_eq!(c.format_version, 1);
        let d = PluginDirectory::new(None).get("microphone_sim").unwrap();
        let chain = c.resolve(&d).unwrap();
        assert_eq!(c.output, chain.output());
        assert_eq!(c.output[0].name, "level_db");
        assert_eq!(VirtualSensorConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_fields() {
        let base = "name = \"a\"\nplugin_id = \"constant\"\nsampling_interval_ms = 10\n";
        assert!(VirtualSensorConfig::parse(&base.replace("10", "0"))
            .unwrap_err()
            .detail
            .contains("sampling_interval_ms"));
        assert!(VirtualSensorConfig::parse(&format!("{base}history_size = 0\n"))
            .unwrap_err()
            .detail
            .contains("history_size"));
        assert!(VirtualSensorConfig::parse(&format!("{base}bogus = 1\n")).is_err());
    }

    #[tokio::test]
    async fn lifecycle_errors() {
        let e = engine();
        let c = VirtualSensorConfig::new(name("s"), "constant", 20);
        e.instantiate(c.clone()).await.unwrap();
        assert_eq!(e.instantiate(c.clone()).await.unwrap_err().kind, ErrorKind::Conflict);

        let unknown = VirtualSensorConfig::new(name("u"), "nope", 20);
        assert_eq!(e.instantiate(unknown).await.unwrap_err().kind, ErrorKind::PluginFailure);
        assert!(e.state(&name("u")).is_err());

        let bad = VirtualSensorConfig::new(name("s"), "constant", 20)
            .with_processors(vec![ProcessorSpec::Scale { field: "zz".into(), factor: 2.0 }]);
        assert_eq!(e.update(&name("s"), bad).await.unwrap_err().kind, ErrorKind::InvalidDescriptor);
        assert_eq!(e.state(&name("s")).unwrap().lifecycle, Lifecycle::Running);

        e.remove(&name("s")).await.unwrap();
        assert_eq!(e.remove(&name("s")).await.unwrap_err().kind, ErrorKind::NotFound);
        assert_eq!(e.update(&name("s"), c).await.unwrap_err().kind, ErrorKind::NotFound);
    }

    #[tokio::test]
    async fn no_writes_after_remove() {
        let e = engine();
        e.instantiate(VirtualSensorConfig::new(name("r"), "sine_wave", 5)).await.unwrap();
        tokio::time::sleep(Duration::from_millis(60)).await;
        e.remove(&name("r")).await.unwrap();
        let before = e.storage().retained(&name("r")).unwrap();
        assert!(!before.is_empty());
        tokio::time::sleep(Duration::from_millis(60)).await;
        assert_eq!(e.storage().retained(&name("r")).unwrap(), before);
    }

    #[tokio::test]
    async fn update_keeps_or_resets_history() {
        let e = engine();
        let s = name("h");
        e.instantiate(VirtualSensorConfig::new(s.clone(), "constant", 5)).await.unwrap();
        tokio::time::sleep(Duration::from_millis(40)).await;
        let n = e.storage().retained(&s).unwrap().len();
        assert!(n > 0);

        // Same output structure: history survives.
        e.update(&s, VirtualSensorConfig::new(s.clone(), "constant", 7)).await.unwrap();
        assert!(e.storage().retained(&s).unwrap().len() >= n);

        // Different structure: history starts over.
        let changed = VirtualSensorConfig::new(s.clone(), "microphone_sim", 5).with_processors(vec![
            ProcessorSpec::NoiseLevelDb { reference: 1.0, window: 2, field: None },
        ]);
        let st = e.update(&s, changed).await.unwrap();
        assert_eq!(st.counters, SensorCounters::default());
        let after = e.storage().retained(&s).unwrap();
        assert!(after.iter().all(|el| el.values.len() == 1 && matches!(el.values[0], Value::Num(_))));
        assert_eq!(e.storage().output(&s).unwrap()[0].name, "level_db");
    }

    #[tokio::test]
    async fn sample_count_tracks_elapsed_time() {
        let e = engine();
        let s = name("t");
        let interval = 50u64;
        let start = std::time::Instant::now();
        e.instantiate(VirtualSensorConfig::new(s.clone(), "constant", interval)).await.unwrap();
        tokio::time::sleep(Duration::from_millis(1000)).await;
        let n = e.state(&s).unwrap().counters.samples;
        let t = start.elapsed().as_millis() as u64;
        // Ticks fire at 0, i, 2i, ... so up to floor(t/i)+1 samples.
        assert!(n + 1 >= t / interval && n <= t / interval + 1, "{n} samples in {t} ms");
        let ts: Vec<i64> = e.storage().retained(&s).unwrap().iter().map(|x| x.ts).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }
}
