//! CSV and JSON outputs of a run. Rows come out in request order, then
//! arrival order, so writing one report twice gives identical files.
//!
//! - `roundtrips.csv`: request_id, owner, sensor, issued_ms, received_ms, latency_ms, elements
//! - `resources.csv`: process, pid, at_ms, cpu_ms, rss_bytes
//! - `shares.csv`: request_id, owner, sensor, round_trips, sub_requests, share_percent
//! - `summary.csv`: metric, value
//! - `storage.csv` (storage runs): at_ms, records, footprint_bytes
//! - `report.json`: the whole report

use std::path::Path;

use serde::Serialize;

use crate::metrics::MetricsReport;
use crate::HarnessError;

pub const ROUNDTRIPS_CSV: &str = "roundtrips.csv";
pub const RESOURCES_CSV: &str = "resources.csv";
pub const SHARES_CSV: &str = "shares.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const STORAGE_CSV: &str = "storage.csv";
pub const REPORT_JSON: &str = "report.json";

/// Reference values reported next to measured ones.
pub const REFERENCE_RATIO: f64 = 6.0;
pub const REFERENCE_DELAY_MS: (f64, f64) = (400.0, 1500.0);

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    let path = dir.join(name);
    // Headers are written explicitly so empty files still carry them.
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Io(e.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct TripRow<'a> {
    request_id: &'a str,
    owner: &'a str,
    sensor: &'a str,
    issued_ms: i64,
    received_ms: i64,
    latency_ms: i64,
    elements: usize,
}

#[derive(Serialize)]
struct ShareRow<'a> {
    request_id: &'a str,
    owner: &'a str,
    sensor: &'a str,
    round_trips: u64,
    sub_requests: u64,
    share_percent: f64,
}

pub fn summary_rows(r: &MetricsReport) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = vec![
        ("scenario".into(), r.scenario.clone()),
        ("kind".into(), r.kind.clone()),
        ("topology".into(), r.topology.clone()),
        ("mode".into(), r.mode.to_string()),
        ("seed".into(), r.seed.to_string()),
        ("failed".into(), r.failed.to_string()),
        ("failure_reason".into(), r.failure_reason.clone()),
        ("requests".into(), r.series.len().to_string()),
        ("duration_ms".into(), r.duration_ms.to_string()),
        ("total_round_trips".into(), r.total_round_trips.to_string()),
        ("total_sub_requests".into(), r.total_sub_requests.to_string()),
        (
            "sub_requests_definition".into(),
            format!(
                "{} per round trip: data fetch and acknowledgment",
                r.sub_requests_per_round_trip
            ),
        ),
        ("time_per_request_ms".into(), opt(r.time_per_request_ms)),
        ("share_cv".into(), opt(r.share_cv)),
        ("starved_requests".into(), r.starved.len().to_string()),
        ("latency_mean_ms".into(), opt(r.latency.as_ref().map(|l| l.mean_ms))),
        ("latency_median_ms".into(), opt(r.latency.as_ref().map(|l| l.median_ms))),
        ("latency_p95_ms".into(), opt(r.latency.as_ref().map(|l| l.p95_ms))),
        ("latency_min_ms".into(), opt(r.latency.as_ref().map(|l| l.min_ms as f64))),
        ("latency_max_ms".into(), opt(r.latency.as_ref().map(|l| l.max_ms as f64))),
        ("data_points".into(), r.data_points.to_string()),
        ("data_points_per_min".into(), r.data_points_per_min.to_string()),
    ];
    for (node, v) in &r.per_client_per_min {
        rows.push((format!("data_points_per_min.{node}"), v.to_string()));
    }
    for (node, v) in &r.connections_accepted {
        rows.push((format!("connections_accepted.{node}"), v.to_string()));
    }
    for s in &r.resources {
        rows.push((format!("cpu_ms_delta.{}", s.process), s.cpu_delta_ms().to_string()));
        rows.push((format!("rss_peak_bytes.{}", s.process), s.peak_rss().to_string()));
        rows.push((format!("sample_gaps.{}", s.process), s.gaps.to_string()));
    }
    if let Some(st) = &r.storage {
        rows.push(("storage_capacity_records".into(), st.capacity_records.to_string()));
        if let Some(f) = &st.fit {
            rows.push(("storage_fit_points".into(), f.points.to_string()));
            rows.push(("storage_bytes_per_record".into(), f.slope.to_string()));
            rows.push(("storage_intercept_bytes".into(), f.intercept.to_string()));
            rows.push(("storage_r_squared".into(), f.r_squared.to_string()));
        }
        rows.push(("storage_plateau_points".into(), st.plateau_points.to_string()));
        rows.push(("storage_plateau_min_bytes".into(), st.plateau_min_bytes.to_string()));
        rows.push(("storage_plateau_max_bytes".into(), st.plateau_max_bytes.to_string()));
    }
    rows
}

fn write_pairs(dir: &Path, name: &str, rows: &[(String, String)]) -> Result<(), HarnessError> {
    let mut w = writer(dir, name)?;
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    for (k, v) in rows {
        w.write_record([k, v]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(dir, e))
}

/// Writes every report file into `dir`.
pub fn report_csv(r: &MetricsReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;

    let mut w = writer(dir, ROUNDTRIPS_CSV)?;
    w.write_record(["request_id", "owner", "sensor", "issued_ms", "received_ms", "latency_ms", "elements"])
        .map_err(csv_err)?;
    for s in &r.series {
        for t in &s.trips {
            w.serialize(TripRow {
                request_id: &s.request_id,
                owner: &s.owner,
                sensor: &s.sensor,
                issued_ms: t.issued_ms,
                received_ms: t.received_ms,
                latency_ms: t.latency_ms,
                elements: t.elements,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(dir, e))?;

    let mut w = writer(dir, SHARES_CSV)?;
    w.write_record(["request_id", "owner", "sensor", "round_trips", "sub_requests", "share_percent"])
        .map_err(csv_err)?;
    let total = r.total_round_trips;
    for s in &r.series {
        w.serialize(ShareRow {
            request_id: &s.request_id,
            owner: &s.owner,
            sensor: &s.sensor,
            round_trips: s.round_trips,
            sub_requests: s.sub_requests,
            share_percent: if total == 0 {
                0.0
            } else {
                100.0 * s.round_trips as f64 / total as f64
            },
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(dir, e))?;

    let mut w = writer(dir, RESOURCES_CSV)?;
    w.write_record(["process", "pid", "at_ms", "cpu_ms", "rss_bytes"]).map_err(csv_err)?;
    for s in &r.resources {
        for (at, cpu, rss) in &s.samples {
            w.write_record([
                s.process.clone(),
                s.pid.to_string(),
                at.to_string(),
                cpu.to_string(),
                rss.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(dir, e))?;

    if let Some(st) = &r.storage {
        let mut w = writer(dir, STORAGE_CSV)?;
        w.write_record(["at_ms", "records", "footprint_bytes"]).map_err(csv_err)?;
        for (at, rec, bytes) in &st.samples {
            w.write_record([at.to_string(), rec.to_string(), bytes.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(dir, e))?;
    }

    write_pairs(dir, SUMMARY_CSV, &summary_rows(r))?;

    let path = dir.join(REPORT_JSON);
    let json = serde_json::to_vec_pretty(r).expect("report serializes");
    std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))
}

pub fn read_report(dir: &Path) -> Result<MetricsReport, HarnessError> {
    let path = dir.join(REPORT_JSON);
    let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Restful against push mean round-trip time, with the reference values
/// alongside. Returns the push/restful ratio when both have round trips.
pub fn write_comparison(dir: &Path, restful: &MetricsReport, push: &MetricsReport) -> Result<Option<f64>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mean = |r: &MetricsReport| r.latency.as_ref().map(|l| l.mean_ms);
    let ratio = match (mean(restful), mean(push)) {
        (Some(a), Some(b)) if a > 0.0 => Some(b / a),
        _ => None,
    };
    let mut rows = Vec::new();
    for (tag, r) in [("restful", restful), ("push", push)] {
        rows.push((format!("{tag}.scenario"), r.scenario.clone()));
        rows.push((format!("{tag}.mean_round_trip_ms"), opt(mean(r))));
        rows.push((
            format!("{tag}.median_round_trip_ms"),
            opt(r.latency.as_ref().map(|l| l.median_ms)),
        ));
        rows.push((format!("{tag}.time_per_request_ms"), opt(r.time_per_request_ms)));
        rows.push((format!("{tag}.share_cv"), opt(r.share_cv)));
        rows.push((format!("{tag}.starved_requests"), r.starved.len().to_string()));
        rows.push((format!("{tag}.data_points_per_min"), r.data_points_per_min.to_string()));
    }
    rows.push(("push_over_restful_round_trip_ratio".into(), opt(ratio)));
    rows.push(("reference_ratio".into(), REFERENCE_RATIO.to_string()));
    rows.push((
        "reference_delay_ms".into(),
        format!("{}-{}", REFERENCE_DELAY_MS.0, REFERENCE_DELAY_MS.1),
    ));
    write_pairs(dir, SUMMARY_CSV, &rows)?;
    Ok(ratio)
}
