//! Runs one scenario: spawns the topology as child processes of the
//! `opsense` binary, drives the workload, samples resources and writes the
//! event log and reports.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use opsense_core::api::{AcquireRequest, Footprint, NodeMetrics};
use opsense_core::clock::now_ms;
use opsense_core::engine::{VirtualSensorConfig, VSENSOR_EXTENSION};
use opsense_core::net::{one_shot, DeviceProfile, Method};
use opsense_core::plugin::{PluginDescriptor, PLUGIN_EXTENSION};
use opsense_core::processor::ProcessorSpec;
use opsense_core::registry::NodeRegistration;
use opsense_core::sharing::remote::{RemoteRequestInfo, RoundTrip};
use opsense_core::wire;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};
use tracing::{info, warn};

use crate::events::{Event, EventLog};
use crate::metrics::MetricsReport;
use crate::report::report_csv;
use crate::resources::ResourceSampler;
use crate::scenario::{builtin_for, sensor_name, ScenarioConfig, ScenarioKind, PHONE_SENSORS};
use crate::HarnessError;

/// Line a process prints on stdout once it accepts connections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadyLine {
    pub event: String,
    pub role: String,
    pub addr: String,
    pub node_id: String,
}

impl ReadyLine {
    pub fn new(role: &str, addr: impl Into<String>, node_id: impl Into<String>) -> Self {
        Self {
            event: "listening".into(),
            role: role.into(),
            addr: addr.into(),
            node_id: node_id.into(),
        }
    }
}

pub const CLIENT_TAG: &str = "clients";
const READY_TIMEOUT: Duration = Duration::from_secs(15);
const REGISTER_TIMEOUT: Duration = Duration::from_secs(15);
const CALL_TIMEOUT: Duration = Duration::from_secs(10);
const ACQUIRE_TIMEOUT: Duration = Duration::from_secs(120);
const STOP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// The `opsense` executable.
    pub binary: PathBuf,
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    /// Overrides the scenario's duration.
    pub duration: Option<Duration>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub dir: PathBuf,
}

struct Spawned {
    name: String,
    role: String,
    node_id: String,
    addr: String,
    pid: u32,
    child: Child,
    exited: Option<String>,
}

impl Spawned {
    async fn spawn(binary: &Path, name: &str, args: &[String], logs: &Path) -> Result<Self, HarnessError> {
        let log_path = logs.join(format!("{name}.log"));
        let log = std::fs::File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
        let mut child = Command::new(binary)
            .args(args)
            .env("MOSDEN_LOG_LEVEL", "warn")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(log)
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| HarnessError::Startup(format!("{name}: spawn {}: {e}", binary.display())))?;
        let pid = child.id().unwrap_or(0);
        let stdout = child.stdout.take().expect("stdout piped");
        let mut lines = BufReader::new(stdout).lines();
        let ready = tokio::time::timeout(READY_TIMEOUT, async {
            while let Ok(Some(l)) = lines.next_line().await {
                if let Ok(r) = serde_json::from_str::<ReadyLine>(&l) {
                    return Some(r);
                }
            }
            None
        })
        .await;
        let ready = match ready {
            Ok(Some(r)) => r,
            Ok(None) => {
                let status = child.wait().await.map(|s| s.to_string()).unwrap_or_default();
                let tail = std::fs::read_to_string(&log_path).unwrap_or_default();
                return Err(HarnessError::Startup(format!(
                    "{name} exited before listening ({status}): {}",
                    tail.trim()
                )));
            }
            Err(_) => return Err(HarnessError::Startup(format!("{name} did not report readiness"))),
        };
        // Keep draining so the child never blocks on a full pipe.
        tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
        Ok(Self {
            name: name.to_owned(),
            role: ready.role,
            node_id: ready.node_id,
            addr: ready.addr,
            pid,
            child,
            exited: None,
        })
    }

    /// Records an exit the first time it is seen.
    fn check(&mut self) -> Option<String> {
        if self.exited.is_some() {
            return None;
        }
        match self.child.try_wait() {
            Ok(Some(s)) => {
                self.exited = Some(s.to_string());
                self.exited.clone()
            }
            _ => None,
        }
    }

    async fn stop(&mut self) -> String {
        if let Some(s) = &self.exited {
            return format!("exited early: {s}");
        }
        let _ = call_raw(&self.addr, Method::Post, "/v1/control/shutdown", None, CALL_TIMEOUT).await;
        match tokio::time::timeout(STOP_TIMEOUT, self.child.wait()).await {
            Ok(Ok(s)) => s.to_string(),
            _ => {
                let _ = self.child.kill().await;
                "killed after shutdown timeout".into()
            }
        }
    }
}

async fn call_raw(
    addr: &str,
    method: Method,
    path: &str,
    body: Option<Vec<u8>>,
    timeout: Duration,
) -> Result<opsense_core::net::HttpReply, HarnessError> {
    Ok(one_shot(addr, method, path, body, DeviceProfile::unconstrained(), timeout).await?)
}

async fn get<T: DeserializeOwned>(addr: &str, path: &str) -> Result<T, HarnessError> {
    Ok(call_raw(addr, Method::Get, path, None, CALL_TIMEOUT).await?.json()?)
}

/// Deterministic per-sensor seed, kept within the exactly representable
/// integer range of an f64 parameter.
pub fn sensor_seed(seed: u64, node: usize, k: usize) -> u64 {
    let mut x = seed ^ ((node as u64) << 32) ^ k as u64;
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (x ^ (x >> 31)) & ((1 << 53) - 1)
}

/// Writes one plugin and one virtual sensor file per sensor of a simulated
/// phone node. Returns (plugins dir, vsensors dir).
pub fn write_node_files(
    dir: &Path,
    node: usize,
    sensors: usize,
    interval_ms: u64,
    history: usize,
    seed: u64,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    let plugins = dir.join("plugins");
    let vsensors = dir.join("vsensors");
    for d in [&plugins, &vsensors] {
        std::fs::create_dir_all(d).map_err(|e| HarnessError::io(d, e))?;
    }
    for k in 0..sensors {
        let name = sensor_name(k);
        let kind = PHONE_SENSORS[k % PHONE_SENSORS.len()];
        let builtin = builtin_for(kind);
        let params: Vec<(&'static str, f64)> = if opsense_core::plugin::builtin::parameter_defaults(builtin)
            .is_some_and(|d| d.iter().any(|(p, _)| *p == "seed"))
        {
            vec![("seed", sensor_seed(seed, node, k) as f64)]
        } else {
            Vec::new()
        };
        let plugin_id = format!("{name}-src");
        let d = PluginDescriptor::builtin(plugin_id.clone(), builtin, params)?;
        let path = plugins.join(format!("{plugin_id}.{PLUGIN_EXTENSION}"));
        std::fs::write(&path, d.to_text()).map_err(|e| HarnessError::io(&path, e))?;

        let mut v = VirtualSensorConfig::new(name.parse()?, plugin_id, interval_ms).with_history(history);
        if kind == "microphone" {
            v = v.with_processors(vec![ProcessorSpec::NoiseLevelDb {
                reference: 1.0,
                window: 5,
                field: None,
            }]);
        }
        let path = vsensors.join(format!("{name}.{VSENSOR_EXTENSION}"));
        std::fs::write(&path, v.to_text()).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok((plugins, vsensors))
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn node_args(node_id: &str, plugins: &Path, vsensors: &Path) -> Vec<String> {
    vec![
        "node".into(),
        "serve".into(),
        "--host".into(),
        "127.0.0.1".into(),
        "--port".into(),
        "0".into(),
        "--node-id".into(),
        node_id.into(),
        "--plugins-dir".into(),
        path_arg(plugins),
        "--vsensors-dir".into(),
        path_arg(vsensors),
        "--log-level".into(),
        "warn".into(),
    ]
}

struct Run {
    opts: RunOptions,
    log: EventLog,
    procs: Vec<Spawned>,
    sampler: ResourceSampler,
    failure: Option<String>,
}

impl Run {
    fn push(&mut self, e: Event) -> Result<(), HarnessError> {
        self.log.push(e)
    }

    async fn spawn(&mut self, name: &str, args: Vec<String>) -> Result<usize, HarnessError> {
        let logs = self.opts.out_dir.join("logs");
        let p = Spawned::spawn(&self.opts.binary, name, &args, &logs).await?;
        info!(process = name, addr = %p.addr, pid = p.pid, "process ready");
        self.push(Event::Process {
            role: p.role.clone(),
            node_id: p.node_id.clone(),
            pid: p.pid,
            addr: p.addr.clone(),
        })?;
        self.procs.push(p);
        Ok(self.procs.len() - 1)
    }

    /// One resource sample of every live process; notes early exits.
    fn sample(&mut self) -> Result<(), HarnessError> {
        let at = now_ms();
        let mut events = Vec::new();
        for p in &mut self.procs {
            if let Some(status) = p.check() {
                warn!(process = %p.name, %status, "process exited during the run");
                events.push(Event::ProcessExit {
                    node_id: p.node_id.clone(),
                    at_ms: at,
                    status: status.clone(),
                });
                self.failure
                    .get_or_insert_with(|| format!("{} exited during the run: {status}", p.name));
                continue;
            }
            if p.exited.is_some() {
                continue;
            }
            events.push(match self.sampler.sample(p.pid) {
                Ok(s) => Event::Resource {
                    process: p.name.clone(),
                    pid: p.pid,
                    at_ms: at,
                    cpu_ms: s.cpu_ms,
                    rss_bytes: s.rss_bytes,
                },
                Err(reason) => Event::SampleGap {
                    process: p.name.clone(),
                    at_ms: at,
                    reason,
                },
            });
        }
        for e in events {
            self.push(e)?;
        }
        Ok(())
    }

    async fn footprint(&mut self, idx: usize) -> Result<(), HarnessError> {
        let p = &self.procs[idx];
        if p.exited.is_some() {
            return Ok(());
        }
        let (node_id, addr) = (p.node_id.clone(), p.addr.clone());
        match get::<Footprint>(&addr, "/v1/storage/footprint").await {
            Ok(f) => self.push(Event::Footprint {
                node_id,
                at_ms: now_ms(),
                records: f.records,
                footprint_bytes: f.footprint_bytes,
                disk_bytes: f.disk_bytes,
            }),
            Err(e) => {
                warn!(error = %e, "footprint sample failed");
                Ok(())
            }
        }
    }

    /// Sampling loop over the measurement window.
    async fn window(&mut self, duration: Duration, footprint_of: Option<usize>) -> Result<(), HarnessError> {
        let period = Duration::from_millis(self.opts.scenario.resource_sample_ms);
        self.push(Event::WindowStart { at_ms: now_ms() })?;
        let deadline = tokio::time::Instant::now() + duration;
        let mut tick = tokio::time::interval(period);
        loop {
            tokio::select! {
                _ = tick.tick() => {
                    self.sample()?;
                    if let Some(i) = footprint_of {
                        self.footprint(i).await?;
                    }
                }
                _ = tokio::time::sleep_until(deadline) => break,
            }
        }
        self.push(Event::WindowEnd { at_ms: now_ms() })?;
        self.sample()?;
        if let Some(i) = footprint_of {
            self.footprint(i).await?;
        }
        Ok(())
    }

    async fn collect_stats(&mut self) -> Result<(), HarnessError> {
        let nodes: Vec<(String, String)> = self
            .procs
            .iter()
            .filter(|p| p.role == "node" && p.exited.is_none())
            .map(|p| (p.node_id.clone(), p.addr.clone()))
            .collect();
        for (node_id, addr) in nodes {
            let m: NodeMetrics = match get(&addr, "/v1/metrics").await {
                Ok(m) => m,
                Err(e) => {
                    warn!(node = %node_id, error = %e, "metrics unavailable");
                    continue;
                }
            };
            self.push(Event::NodeStats {
                node_id: node_id.clone(),
                connections_accepted: m.connections_accepted,
            })?;
            for s in m.subscriptions {
                self.push(Event::Subscription {
                    node_id: node_id.clone(),
                    subscription_id: s.id.to_string(),
                    sensor: s.sensor.to_string(),
                    mode: s.mode,
                    state: format!("{:?}", s.state),
                    enqueued: s.counters.enqueued,
                    delivered: s.counters.delivered,
                    dropped: s.counters.dropped,
                    reconnects: s.counters.reconnects,
                    connections: s.counters.connections,
                    attempts: s.counters.attempts,
                    pending: s.pending,
                })?;
            }
            for r in m.requests {
                self.push(Event::RequestStats {
                    request_id: r.request_id.to_string(),
                    received: r.received,
                    round_trips: r.round_trips,
                    duplicates: r.duplicates,
                    connections: r.connections,
                    reconnects: r.reconnects,
                    failures: r.failures,
                })?;
            }
        }
        Ok(())
    }

    /// Stops processes in reverse start order: consumers release their
    /// subscriptions before owners go away.
    async fn stop_all(&mut self) -> Result<(), HarnessError> {
        for i in (0..self.procs.len()).rev() {
            let status = self.procs[i].stop().await;
            let e = Event::ProcessExit {
                node_id: self.procs[i].node_id.clone(),
                at_ms: now_ms(),
                status,
            };
            self.push(e)?;
        }
        Ok(())
    }

    async fn load(&mut self, duration: Duration) -> Result<(), HarnessError> {
        let sc = self.opts.scenario.clone();
        let out = self.opts.out_dir.clone();
        let reg = self
            .spawn(
                "registry",
                vec![
                    "registry".into(),
                    "serve".into(),
                    "--host".into(),
                    "127.0.0.1".into(),
                    "--port".into(),
                    "0".into(),
                    "--log-level".into(),
                    "warn".into(),
                ],
            )
            .await?;
        let registry = self.procs[reg].addr.clone();
        for c in 0..sc.clients {
            let id = format!("client-{}", c + 1);
            let dir = out.join("nodes").join(&id);
            let (plugins, vsensors) = write_node_files(
                &dir,
                c,
                sc.sensors_per_client,
                sc.sampling_interval_ms,
                sc.history_size,
                sc.seed,
            )?;
            let mut args = node_args(&id, &plugins, &vsensors);
            args.extend(["--registry".into(), registry.clone(), "--group-tag".into(), CLIENT_TAG.into()]);
            self.spawn(&id, args).await?;
        }
        wait_registered(&registry, sc.clients).await?;

        let profile = sc.server_profile();
        let dir = out.join("nodes").join("server");
        let (plugins, vsensors) = write_node_files(&dir, sc.clients, 0, sc.sampling_interval_ms, sc.history_size, sc.seed)?;
        let mut args = node_args("server", &plugins, &vsensors);
        args.extend([
            "--registry".into(),
            registry.clone(),
            "--worker-threads".into(),
            profile.worker_threads.to_string(),
            "--connection-cost-us".into(),
            profile.connection_cost_us.to_string(),
            "--request-cost-us".into(),
            profile.request_cost_us.to_string(),
        ]);
        let server = self.spawn("server", args).await?;
        let server_addr = self.procs[server].addr.clone();

        let acquire = AcquireRequest {
            requests: sc.requests,
            mode: sc.mode,
            interval_ms: sc.sampling_interval_ms,
            tag: Some(CLIENT_TAG.into()),
        };
        let reply = call_raw(
            &server_addr,
            Method::Post,
            "/v1/control/acquire",
            Some(wire::encode(&acquire)),
            ACQUIRE_TIMEOUT,
        )
        .await?;
        let infos: Vec<RemoteRequestInfo> = reply
            .json()
            .map_err(|e| HarnessError::Startup(format!("acquire on server: {e}")))?;
        for r in &infos {
            self.push(Event::Request {
                request_id: r.request_id.to_string(),
                owner: r.owner.clone(),
                sensor: r.sensor.to_string(),
                subscription_id: r.subscription_id.to_string(),
            })?;
        }
        info!(requests = infos.len(), "workload running");

        self.window(duration, None).await?;

        if self.procs[server].exited.is_none() {
            let trips: Vec<RoundTrip> = get(&server_addr, "/v1/metrics/roundtrips").await?;
            for t in trips {
                self.push(Event::Fetch {
                    request_id: t.request_id.to_string(),
                    sensor: t.sensor.to_string(),
                    issued_ms: t.issued_ms,
                    received_ms: t.received_ms,
                    latency_ms: t.latency_ms,
                    elements: t.elements,
                })?;
                self.push(Event::Ack {
                    request_id: t.request_id.to_string(),
                    at_ms: t.received_ms,
                })?;
            }
        }
        self.collect_stats().await
    }

    async fn storage(&mut self, duration: Duration) -> Result<(), HarnessError> {
        let sc = self.opts.scenario.clone();
        let dir = self.opts.out_dir.join("nodes").join("storage");
        let (plugins, vsensors) = write_node_files(
            &dir,
            0,
            sc.sensors_per_client,
            sc.sampling_interval_ms,
            sc.history_size,
            sc.seed,
        )?;
        let mut args = node_args("storage", &plugins, &vsensors);
        args.extend(["--data-dir".into(), path_arg(&dir.join("data"))]);
        let idx = self.spawn("storage", args).await?;
        self.window(duration, Some(idx)).await?;
        self.collect_stats().await
    }
}

async fn wait_registered(registry: &str, clients: usize) -> Result<(), HarnessError> {
    let path = format!("/v1/registry/nodes?tag={CLIENT_TAG}");
    let deadline = tokio::time::Instant::now() + REGISTER_TIMEOUT;
    loop {
        let n = get::<Vec<NodeRegistration>>(registry, &path).await.map(|v| v.len()).unwrap_or(0);
        if n >= clients {
            return Ok(());
        }
        if tokio::time::Instant::now() >= deadline {
            return Err(HarnessError::Startup(format!(
                "only {n} of {clients} clients registered"
            )));
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

/// Runs a scenario to completion and writes `events.jsonl`, the CSV reports
/// and `report.json` into `opts.out_dir`.
pub async fn run_scenario(opts: RunOptions) -> Result<RunOutcome, HarnessError> {
    let sc = opts.scenario.clone();
    sc.validate()?;
    let out = opts.out_dir.clone();
    let logs = out.join("logs");
    std::fs::create_dir_all(&logs).map_err(|e| HarnessError::io(&logs, e))?;
    let path = out.join("scenario.toml");
    std::fs::write(&path, sc.to_text()).map_err(|e| HarnessError::io(&path, e))?;
    let duration = opts.duration.unwrap_or(Duration::from_secs(sc.duration_s));

    let mut run = Run {
        log: EventLog::create(&out)?,
        opts,
        procs: Vec::new(),
        sampler: ResourceSampler::default(),
        failure: None,
    };
    let kind = match sc.kind {
        ScenarioKind::Load => "load",
        ScenarioKind::Storage => "storage",
    };
    let topology = match sc.topology {
        crate::scenario::Topology::WorkstationServer => "workstation_server",
        crate::scenario::Topology::ConstrainedServer => "constrained_server",
    };
    run.push(Event::RunStart {
        scenario: sc.name.clone(),
        kind: kind.into(),
        topology: topology.into(),
        mode: sc.mode,
        requests: sc.requests,
        seed: sc.seed,
        at_ms: now_ms(),
        sub_requests_per_round_trip: 2,
        capacity_records: match sc.kind {
            ScenarioKind::Storage => (sc.sensors_per_client * sc.history_size) as u64,
            ScenarioKind::Load => 0,
        },
    })?;

    let body = match sc.kind {
        ScenarioKind::Load => run.load(duration).await,
        ScenarioKind::Storage => run.storage(duration).await,
    };
    let stopped = run.stop_all().await;
    if let Err(e) = body {
        // Children are killed on drop; keep what was logged for diagnosis.
        let _ = run.push(Event::RunEnd {
            at_ms: now_ms(),
            failed: true,
            reason: e.to_string(),
        });
        let _ = run.log.finish();
        return Err(e);
    }
    stopped?;
    let failure = run.failure.take();
    run.push(Event::RunEnd {
        at_ms: now_ms(),
        failed: failure.is_some(),
        reason: failure.unwrap_or_default(),
    })?;
    let events = run.log.finish()?;
    let report = MetricsReport::from_events(&events);
    report_csv(&report, &out)?;
    Ok(RunOutcome { report, dir: out })
}
