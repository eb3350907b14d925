//! Multi-process load harness: spawns a registry, client nodes and a server
//! node as local processes, drives a subscription workload, samples CPU and
//! memory, and derives round-trip statistics from a raw event log.

pub mod events;
pub mod metrics;
pub mod report;
pub mod resources;
pub mod run;
pub mod scenario;

use std::path::Path;

pub use events::{read_events, Event, EventLog, EVENTS_FILE};
pub use metrics::{round_trip_share, time_per_request, MetricsReport};
pub use run::{run_scenario, RunOptions, RunOutcome};
pub use scenario::{bundled, resolve, ScenarioConfig, ScenarioKind, Topology};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("process: {0}")]
    Process(String),
    #[error(transparent)]
    Node(#[from] opsense_core::EngineError),
}

impl HarnessError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io(format!("{}: {e}", path.display()))
    }
}
