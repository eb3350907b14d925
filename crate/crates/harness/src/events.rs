//! The raw event log of a run, one JSON object per line in `events.jsonl`.
//! Every statistic in a report is computed from this log alone.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use opsense_core::sharing::Mode;
use opsense_core::TimestampMs;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunStart {
        scenario: String,
        kind: String,
        topology: String,
        mode: Mode,
        requests: usize,
        seed: u64,
        at_ms: TimestampMs,
        /// Sub-requests logged per round trip: the data fetch and its acknowledgment.
        sub_requests_per_round_trip: u32,
        /// Storage runs: records held once every history is full.
        #[serde(default)]
        capacity_records: u64,
    },
    Process {
        role: String,
        node_id: String,
        pid: u32,
        addr: String,
    },
    Request {
        request_id: String,
        owner: String,
        sensor: String,
        subscription_id: String,
    },
    WindowStart {
        at_ms: TimestampMs,
    },
    WindowEnd {
        at_ms: TimestampMs,
    },
    Resource {
        process: String,
        pid: u32,
        at_ms: TimestampMs,
        cpu_ms: u64,
        rss_bytes: u64,
    },
    SampleGap {
        process: String,
        at_ms: TimestampMs,
        reason: String,
    },
    Fetch {
        request_id: String,
        sensor: String,
        issued_ms: TimestampMs,
        received_ms: TimestampMs,
        latency_ms: i64,
        elements: usize,
    },
    Ack {
        request_id: String,
        at_ms: TimestampMs,
    },
    Subscription {
        node_id: String,
        subscription_id: String,
        sensor: String,
        mode: Mode,
        state: String,
        enqueued: u64,
        delivered: u64,
        dropped: u64,
        reconnects: u64,
        connections: u64,
        attempts: u64,
        pending: usize,
    },
    RequestStats {
        request_id: String,
        received: u64,
        round_trips: u64,
        duplicates: u64,
        connections: u64,
        reconnects: u64,
        failures: u64,
    },
    NodeStats {
        node_id: String,
        connections_accepted: u64,
    },
    Footprint {
        node_id: String,
        at_ms: TimestampMs,
        records: u64,
        footprint_bytes: u64,
        disk_bytes: u64,
    },
    ProcessExit {
        node_id: String,
        at_ms: TimestampMs,
        status: String,
    },
    RunEnd {
        at_ms: TimestampMs,
        failed: bool,
        reason: String,
    },
}

/// Append-only writer; the orchestrator is its only writer.
pub struct EventLog {
    out: BufWriter<File>,
    events: Vec<Event>,
}

impl EventLog {
    pub fn create(dir: &Path) -> Result<Self, HarnessError> {
        let f = File::create(dir.join(EVENTS_FILE)).map_err(|e| HarnessError::io(dir, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            events: Vec::new(),
        })
    }

    pub fn push(&mut self, e: Event) -> Result<(), HarnessError> {
        serde_json::to_writer(&mut self.out, &e).expect("events serialize");
        self.out.write_all(b"\n").map_err(|e| HarnessError::Io(e.to_string()))?;
        self.events.push(e);
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn finish(mut self) -> Result<Vec<Event>, HarnessError> {
        self.out.flush().map_err(|e| HarnessError::Io(e.to_string()))?;
        Ok(self.events)
    }
}

pub fn read_events(dir: &Path) -> Result<Vec<Event>, HarnessError> {
    let path = dir.join(EVENTS_FILE);
    let f = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
