//! Statistics of one run, derived from its event log.
//!
//! A round trip counts toward a run when its response arrived inside the
//! measurement window `[window_start, window_end)`.

use std::collections::{BTreeMap, HashMap};

use opsense_core::sharing::Mode;
use opsense_core::{EngineError, TimestampMs};
use serde::{Deserialize, Serialize};

use crate::events::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: i64,
    pub max_ms: i64,
}

impl LatencyStats {
    pub fn of(latencies: &[i64]) -> Option<Self> {
        if latencies.is_empty() {
            return None;
        }
        let mut v = latencies.to_vec();
        v.sort_unstable();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        };
        // Nearest rank.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Self {
            count: n,
            mean_ms: v.iter().map(|&x| x as f64).sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: v[rank - 1] as f64,
            min_ms: v[0],
            max_ms: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trip {
    pub issued_ms: TimestampMs,
    pub received_ms: TimestampMs,
    pub latency_ms: i64,
    pub elements: usize,
}

/// Round trips of one request, in arrival order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSeries {
    pub request_id: String,
    pub owner: String,
    pub sensor: String,
    pub round_trips: u64,
    pub sub_requests: u64,
    pub elements: u64,
    pub trips: Vec<Trip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSeries {
    pub process: String,
    pub pid: u32,
    /// (at_ms, cumulative cpu ms, resident bytes)
    pub samples: Vec<(TimestampMs, u64, u64)>,
    pub gaps: usize,
}

impl ResourceSeries {
    pub fn cpu_delta_ms(&self) -> u64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.1.saturating_sub(a.1),
            _ => 0,
        }
    }

    pub fn peak_rss(&self) -> u64 {
        self.samples.iter().map(|s| s.2).max().unwrap_or(0)
    }
}

/// Least-squares line through footprint vs record count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl LinearFit {
    pub fn of(points: &[(f64, f64)]) -> Option<Self> {
        let n = points.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
        Some(Self {
            points: n,
            slope,
            intercept: my - slope * mx,
            r_squared,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageSummary {
    /// Every sensor's history full.
    pub capacity_records: u64,
    /// Fit over the samples taken while histories were still filling.
    pub fit: Option<LinearFit>,
    pub plateau_points: usize,
    pub plateau_min_bytes: u64,
    pub plateau_max_bytes: u64,
    /// (at_ms, records, footprint bytes)
    pub samples: Vec<(TimestampMs, u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionRow {
    pub node_id: String,
    pub subscription_id: String,
    pub sensor: String,
    pub mode: Mode,
    pub connections: u64,
    pub reconnects: u64,
    pub attempts: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub kind: String,
    pub topology: String,
    pub mode: Mode,
    pub seed: u64,
    pub failed: bool,
    pub failure_reason: String,
    pub sub_requests_per_round_trip: u32,
    pub duration_ms: i64,
    pub total_round_trips: u64,
    pub total_sub_requests: u64,
    /// Experiment duration over completed round trips.
    pub time_per_request_ms: Option<f64>,
    /// (request id, percent of all round trips), in request order.
    pub shares: Vec<(String, f64)>,
    /// Coefficient of variation (population) of the shares.
    pub share_cv: Option<f64>,
    /// Requests that completed no round trip.
    pub starved: Vec<String>,
    pub latency: Option<LatencyStats>,
    pub data_points: u64,
    pub data_points_per_min: f64,
    /// Data points per minute received from each client node.
    pub per_client_per_min: BTreeMap<String, f64>,
    pub series: Vec<RequestSeries>,
    pub resources: Vec<ResourceSeries>,
    pub connections_accepted: BTreeMap<String, u64>,
    pub subscriptions: Vec<SubscriptionRow>,
    pub storage: Option<StorageSummary>,
}

/// Experiment duration divided by completed round trips.
pub fn time_per_request(report: &MetricsReport) -> Result<f64, EngineError> {
    if report.total_round_trips == 0 {
        return Err(EngineError::invalid_query("no round trips completed"));
    }
    Ok(report.duration_ms as f64 / report.total_round_trips as f64)
}

/// Each request's round trips as a percentage of all round trips.
pub fn round_trip_share(report: &MetricsReport) -> Result<Vec<(String, f64)>, EngineError> {
    let total: u64 = report.series.iter().map(|s| s.round_trips).sum();
    if total == 0 {
        return Err(EngineError::invalid_query("no round trips completed"));
    }
    Ok(report
        .series
        .iter()
        .map(|s| (s.request_id.clone(), 100.0 * s.round_trips as f64 / total as f64))
        .collect())
}

fn coefficient_of_variation(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

impl MetricsReport {
    pub fn from_events(events: &[Event]) -> Self {
        let mut r = MetricsReport {
            scenario: String::new(),
            kind: String::new(),
            topology: String::new(),
            mode: Mode::Restful,
            seed: 0,
            failed: false,
            failure_reason: String::new(),
            sub_requests_per_round_trip: 2,
            duration_ms: 0,
            total_round_trips: 0,
            total_sub_requests: 0,
            time_per_request_ms: None,
            shares: Vec::new(),
            share_cv: None,
            starved: Vec::new(),
            latency: None,
            data_points: 0,
            data_points_per_min: 0.0,
            per_client_per_min: BTreeMap::new(),
            series: Vec::new(),
            resources: Vec::new(),
            connections_accepted: BTreeMap::new(),
            subscriptions: Vec::new(),
            storage: None,
        };
        let mut start = None;
        let mut end = None;
        let mut node_of_addr: HashMap<String, String> = HashMap::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut resources: BTreeMap<String, ResourceSeries> = BTreeMap::new();
        let mut footprints = Vec::new();
        let mut capacity = 0u64;

        for e in events {
            match e {
                Event::RunStart {
                    scenario,
                    kind,
                    topology,
                    mode,
                    seed,
                    sub_requests_per_round_trip,
                    capacity_records,
                    ..
                } => {
                    r.scenario = scenario.clone();
                    r.kind = kind.clone();
                    r.topology = topology.clone();
                    r.mode = *mode;
                    r.seed = *seed;
                    r.sub_requests_per_round_trip = *sub_requests_per_round_trip;
                    capacity = *capacity_records;
                }
                Event::Process { node_id, addr, .. } => {
                    node_of_addr.insert(addr.clone(), node_id.clone());
                }
                Event::Request {
                    request_id,
                    owner,
                    sensor,
                    ..
                } => {
                    index.insert(request_id.clone(), r.series.len());
                    r.series.push(RequestSeries {
                        request_id: request_id.clone(),
                        owner: node_of_addr.get(owner).cloned().unwrap_or_else(|| owner.clone()),
                        sensor: sensor.clone(),
                        round_trips: 0,
                        sub_requests: 0,
                        elements: 0,
                        trips: Vec::new(),
                    });
                }
                Event::WindowStart { at_ms } => start = Some(*at_ms),
                Event::WindowEnd { at_ms } => end = Some(*at_ms),
                Event::Resource {
                    process,
                    pid,
                    at_ms,
                    cpu_ms,
                    rss_bytes,
                } => resources
                    .entry(process.clone())
                    .or_insert_with(|| ResourceSeries {
                        process: process.clone(),
                        pid: *pid,
                        samples: Vec::new(),
                        gaps: 0,
                    })
                    .samples
                    .push((*at_ms, *cpu_ms, *rss_bytes)),
                Event::SampleGap { process, .. } => {
                    if let Some(s) = resources.get_mut(process) {
                        s.gaps += 1;
                    }
                }
                Event::NodeStats {
                    node_id,
                    connections_accepted,
                } => {
                    r.connections_accepted.insert(node_id.clone(), *connections_accepted);
                }
                Event::Subscription {
                    node_id,
                    subscription_id,
                    sensor,
                    mode,
                    connections,
                    reconnects,
                    attempts,
                    delivered,
                    dropped,
                    ..
                } => r.subscriptions.push(SubscriptionRow {
                    node_id: node_id.clone(),
                    subscription_id: subscription_id.clone(),
                    sensor: sensor.clone(),
                    mode: *mode,
                    connections: *connections,
                    reconnects: *reconnects,
                    attempts: *attempts,
                    delivered: *delivered,
                    dropped: *dropped,
                }),
                Event::Footprint {
                    at_ms,
                    records,
                    footprint_bytes,
                    ..
                } => footprints.push((*at_ms, *records, *footprint_bytes)),
                Event::RunEnd { failed, reason, .. } => {
                    r.failed = *failed;
                    r.failure_reason = reason.clone();
                }
                _ => {}
            }
        }

        let (Some(start), Some(end)) = (start, end) else {
            r.resources = resources.into_values().collect();
            return r;
        };
        r.duration_ms = end - start;
        let in_window = |t: TimestampMs| t >= start && t < end;
        let mut all_latencies = Vec::new();
        for e in events {
            match e {
                Event::Fetch {
                    request_id,
                    issued_ms,
                    received_ms,
                    latency_ms,
                    elements,
                    ..
                } if in_window(*received_ms) => {
                    if let Some(&i) = index.get(request_id) {
                        let s = &mut r.series[i];
                        s.round_trips += 1;
                        s.sub_requests += 1;
                        s.elements += *elements as u64;
                        s.trips.push(Trip {
                            issued_ms: *issued_ms,
                            received_ms: *received_ms,
                            latency_ms: *latency_ms,
                            elements: *elements,
                        });
                        all_latencies.push(*latency_ms);
                    }
                }
                Event::Ack { request_id, at_ms } if in_window(*at_ms) => {
                    if let Some(&i) = index.get(request_id) {
                        r.series[i].sub_requests += 1;
                    }
                }
                _ => {}
            }
        }
        r.total_round_trips = r.series.iter().map(|s| s.round_trips).sum();
        r.total_sub_requests = r.series.iter().map(|s| s.sub_requests).sum();
        r.time_per_request_ms = time_per_request(&r).ok();
        r.shares = round_trip_share(&r).unwrap_or_default();
        r.share_cv = coefficient_of_variation(&r.shares.iter().map(|s| s.1).collect::<Vec<_>>());
        r.starved = r
            .series
            .iter()
            .filter(|s| s.round_trips == 0)
            .map(|s| s.request_id.clone())
            .collect();
        r.latency = LatencyStats::of(&all_latencies);
        r.data_points = r.series.iter().map(|s| s.elements).sum();
        let minutes = r.duration_ms as f64 / 60_000.0;
        if minutes > 0.0 {
            r.data_points_per_min = r.data_points as f64 / minutes;
            let mut per: BTreeMap<String, u64> = BTreeMap::new();
            for s in &r.series {
                *per.entry(s.owner.clone()).or_default() += s.elements;
            }
            r.per_client_per_min = per.into_iter().map(|(k, v)| (k, v as f64 / minutes)).collect();
        }
        r.resources = resources.into_values().collect();
        if !footprints.is_empty() {
            r.storage = Some(storage_summary(footprints, capacity));
        }
        r
    }
}

fn storage_summary(samples: Vec<(TimestampMs, u64, u64)>, capacity: u64) -> StorageSummary {
    let filling: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.1 < capacity)
        .map(|s| (s.1 as f64, s.2 as f64))
        .collect();
    let plateau: Vec<u64> = samples.iter().filter(|s| s.1 >= capacity).map(|s| s.2).collect();
    StorageSummary {
        capacity_records: capacity,
        fit: LinearFit::of(&filling),
        plateau_points: plateau.len(),
        plateau_min_bytes: plateau.iter().copied().min().unwrap_or(0),
        plateau_max_bytes: plateau.iter().copied().max().unwrap_or(0),
        samples,
    }
}
