//! CPU and memory of child processes, read from `/proc`.
//!
//! CPU is cumulative user plus system time in milliseconds, converted from
//! clock ticks; memory is the resident set in bytes.

use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceSample {
    pub cpu_ms: u64,
    pub rss_bytes: u64,
}

fn clock_ticks() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as u64
    } else {
        100
    }
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 {
        p as u64
    } else {
        4096
    }
}

/// utime and stime from a `/proc/<pid>/stat` line, in ticks.
fn parse_stat(stat: &str) -> Option<(u64, u64)> {
    // The command name may contain spaces; fields resume after its `)`.
    let rest = &stat[stat.rfind(')')? + 1..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    // rest starts at field 3 (state); utime is field 14, stime 15.
    Some((f.get(11)?.parse().ok()?, f.get(12)?.parse().ok()?))
}

/// Resident pages from `/proc/<pid>/statm`.
fn parse_statm(statm: &str) -> Option<u64> {
    statm.split_whitespace().nth(1)?.parse().ok()
}

pub struct ResourceSampler {
    tick_ms: f64,
    page: u64,
}

impl Default for ResourceSampler {
    fn default() -> Self {
        Self {
            tick_ms: 1000.0 / clock_ticks() as f64,
            page: page_size(),
        }
    }
}

impl ResourceSampler {
    pub fn sample(&self, pid: u32) -> Result<ResourceSample, String> {
        let dir = PathBuf::from(format!("/proc/{pid}"));
        let stat = std::fs::read_to_string(dir.join("stat")).map_err(|e| format!("stat: {e}"))?;
        let statm = std::fs::read_to_string(dir.join("statm")).map_err(|e| format!("statm: {e}"))?;
        let (u, s) = parse_stat(&stat).ok_or("stat: unparsable")?;
        let pages = parse_statm(&statm).ok_or("statm: unparsable")?;
        Ok(ResourceSample {
            cpu_ms: ((u + s) as f64 * self.tick_ms).round() as u64,
            rss_bytes: pages * self.page,
        })
    }
}
