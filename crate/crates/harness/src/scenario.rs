//! Scenario files: what topology to spawn and what workload to drive.

use std::path::Path;

use opsense_core::sharing::Mode;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const SCENARIO_EXTENSION: &str = "scenario";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Clients serve sensors; the server subscribes to `requests` of them.
    Load,
    /// One node with many sensors; storage footprint is tracked over time.
    Storage,
}

/// Which hardware role the server plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Server on a workstation: no emulated costs.
    WorkstationServer,
    /// Server on a phone-class device: one worker thread and per-connection
    /// and per-request costs.
    ConstrainedServer,
}

/// Emulation knobs of the server process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerProfile {
    /// 0 means one per core.
    pub worker_threads: usize,
    pub connection_cost_us: u64,
    pub request_cost_us: u64,
}

impl Topology {
    pub fn default_profile(self) -> ServerProfile {
        match self {
            Topology::WorkstationServer => ServerProfile {
                worker_threads: 0,
                connection_cost_us: 0,
                request_cost_us: 0,
            },
            Topology::ConstrainedServer => ServerProfile {
                worker_threads: 1,
                connection_cost_us: 12_000,
                request_cost_us: 1_000,
            },
        }
    }
}

fn default_format_version() -> u32 {
    1
}

fn default_resource_sample_ms() -> u64 {
    1000
}

fn default_history_size() -> usize {
    opsense_core::storage::DEFAULT_HISTORY_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub kind: ScenarioKind,
    #[serde(default = "default_topology")]
    pub topology: Topology,
    #[serde(default)]
    pub clients: usize,
    pub sensors_per_client: usize,
    pub sampling_interval_ms: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub requests: usize,
    pub duration_s: u64,
    #[serde(default = "default_resource_sample_ms")]
    pub resource_sample_ms: u64,
    #[serde(default = "default_history_size")]
    pub history_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the topology's default server knobs.
    #[serde(default)]
    pub server: Option<ServerProfile>,
}

fn default_topology() -> Topology {
    Topology::WorkstationServer
}

fn default_mode() -> Mode {
    Mode::Restful
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_owned()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn server_profile(&self) -> ServerProfile {
        self.server.unwrap_or_else(|| self.topology.default_profile())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.format_version != 1 {
            return bad(format!("format_version: unsupported version {}", self.format_version));
        }
        if self.name.parse::<opsense_core::SensorName>().is_err() {
            return bad(format!("name: `{}` must use [A-Za-z0-9_.-]", self.name));
        }
        if self.sensors_per_client == 0 {
            return bad("sensors_per_client: must be at least 1".into());
        }
        if self.sampling_interval_ms == 0 {
            return bad("sampling_interval_ms: must be at least 1".into());
        }
        if self.duration_s == 0 {
            return bad("duration_s: must be at least 1".into());
        }
        if self.resource_sample_ms == 0 {
            return bad("resource_sample_ms: must be at least 1".into());
        }
        if self.history_size == 0 {
            return bad("history_size: must be at least 1".into());
        }
        if self.kind == ScenarioKind::Load {
            if self.clients == 0 {
                return bad("clients: must be at least 1".into());
            }
            if self.requests == 0 {
                return bad("requests: must be at least 1".into());
            }
            let available = self.clients * self.sensors_per_client;
            if self.requests > available {
                return bad(format!(
                    "requests: {} exceeds clients × sensors_per_client = {available}",
                    self.requests
                ));
            }
        }
        Ok(())
    }
}

macro_rules! bundle {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../scenarios/", $name, ".scenario")))),*]
    };
}

/// Scenarios shipped with the harness: (name, file text).
pub fn bundled() -> &'static [(&'static str, &'static str)] {
    bundle!(
        "setup1-restful-30",
        "setup1-restful-60",
        "setup1-restful-90",
        "setup1-push-30",
        "setup1-push-60",
        "setup1-push-90",
        "setup2-restful-30",
        "setup2-restful-60",
        "setup2-restful-90",
        "setup2-push-30",
        "setup2-push-60",
        "setup2-push-90",
        "storage-linearity",
    )
}

/// Loads a scenario file, or a bundled scenario by name.
pub fn resolve(name_or_path: &str) -> Result<ScenarioConfig, HarnessError> {
    let path = Path::new(name_or_path);
    if path.exists() {
        return ScenarioConfig::load(path);
    }
    match bundled().iter().find(|(n, _)| *n == name_or_path) {
        Some((_, text)) => ScenarioConfig::parse(text),
        None => Err(HarnessError::Config(format!(
            "scenario: `{name_or_path}` is neither a file nor a bundled scenario"
        ))),
    }
}

/// Sensor kinds each simulated client carries, in order. Sensor `k` of a
/// client is kind `k mod 8`.
pub const PHONE_SENSORS: [&str; 8] = [
    "accelerometer",
    "microphone",
    "light",
    "orientation",
    "proximity",
    "gyroscope",
    "magnetic",
    "pressure",
];

/// Builtin source standing in for a phone sensor kind.
pub fn builtin_for(kind: &str) -> &'static str {
    match kind {
        "accelerometer" => "accelerometer_sim",
        "microphone" => "microphone_sim",
        "light" => "light_sim",
        "orientation" => "sine_wave",
        "proximity" => "constant",
        "gyroscope" => "gaussian_noise",
        "magnetic" => "random_walk",
        "pressure" => "pressure_sim",
        _ => "constant",
    }
}

/// Name of sensor `k` on a simulated client: the kind, suffixed from the
/// second round of kinds on.
pub fn sensor_name(k: usize) -> String {
    let kind = PHONE_SENSORS[k % PHONE_SENSORS.len()];
    match k / PHONE_SENSORS.len() {
        0 => kind.to_owned(),
        n => format!("{kind}-{n}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
kind = "load"
topology = "constrained_server"
clients = 3
sensors_per_client = 30
sampling_interval_ms = 1000
mode = "push"
requests = 90
duration_s = 180
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ScenarioConfig::parse(BASE).unwrap();
        assert_eq!(c.mode, Mode::Push);
        assert_eq!(c.server_profile().worker_threads, 1);
        assert_eq!(ScenarioConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn too_many_requests_rejected() {
        let e = ScenarioConfig::parse(&BASE.replace("requests = 90", "requests = 91")).unwrap_err();
        assert!(e.to_string().contains("requests"), "{e}");
    }

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in bundled() {
            let c = ScenarioConfig::parse(text).unwrap();
            assert_eq!(&c.name, name);
        }
        let c = resolve("setup2-push-90").unwrap();
        assert_eq!((c.topology, c.mode, c.requests), (Topology::ConstrainedServer, Mode::Push, 90));
        assert!(resolve("no-such").is_err());
    }

    #[test]
    fn sensor_names_cycle_kinds() {
        assert_eq!(sensor_name(0), "accelerometer");
        assert_eq!(sensor_name(7), "pressure");
        assert_eq!(sensor_name(8), "accelerometer-1");
        assert_eq!(sensor_name(29), "gyroscope-3");
        let names: std::collections::BTreeSet<_> = (0..30).map(sensor_name).collect();
        assert_eq!(names.len(), 30);
    }
}
