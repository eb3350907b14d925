//! Single time source for a node, swappable for a fake in tests.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::types::TimestampMs;

pub trait Clock: Send + Sync + 'static {
    fn now_ms(&self) -> TimestampMs;
}

/// Wall clock anchored once at construction and advanced by a monotonic
/// instant, so successive readings never go backwards.
#[derive(Debug, Clone)]
pub struct SystemClock {
    epoch_ms: TimestampMs,
    anchor: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        let epoch_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as TimestampMs)
            .unwrap_or(0);
        Self {
            epoch_ms,
            anchor: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> TimestampMs {
        self.epoch_ms + self.anchor.elapsed().as_millis() as TimestampMs
    }
}

#[derive(Debug, Clone, Default)]
pub struct FakeClock(Arc<AtomicI64>);

impl FakeClock {
    pub fn new(at: TimestampMs) -> Self {
        Self(Arc::new(AtomicI64::new(at)))
    }

    pub fn set(&self, at: TimestampMs) {
        self.0.store(at, Ordering::SeqCst);
    }

    pub fn advance(&self, by: TimestampMs) {
        self.0.fetch_add(by, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now_ms(&self) -> TimestampMs {
        self.0.load(Ordering::SeqCst)
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Process-wide system clock.
pub fn system() -> SharedClock {
    static CLOCK: std::sync::OnceLock<Arc<SystemClock>> = std::sync::OnceLock::new();
    CLOCK.get_or_init(|| Arc::new(SystemClock::new())).clone()
}

/// Current time from the process-wide clock.
pub fn now_ms() -> TimestampMs {
    system().now_ms()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn successive_calls_are_monotonic() {
        let mut prev = now_ms();
        for _ in 0..10_000 {
            let t = now_ms();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn fake_clock_identity() {
        let c = FakeClock::new(1000);
        assert_eq!(c.now_ms(), 1000);
        c.advance(5);
        assert_eq!(c.now_ms(), 1005);
    }

    #[test]
    fn interval_around_sleep() {
        // Oracle: an independent std::time::Instant measurement of the same sleep.
        let oracle = Instant::now();
        let t1 = now_ms();
        std::thread::sleep(Duration::from_millis(50));
        let t2 = now_ms();
        let wall = oracle.elapsed().as_millis() as i64;
        let elapsed = t2 - t1;
        assert!(elapsed >= 49, "elapsed {elapsed}");
        assert!(elapsed <= wall + 1, "elapsed {elapsed} wall {wall}");
    }
}
