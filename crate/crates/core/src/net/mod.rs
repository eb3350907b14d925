//! HTTP/1.1 transport with explicit connection accounting.
//!
//! Both ends open and accept TCP connections by hand so every connection is
//! counted: a persistent session reuses one, a one-shot exchange opens one and
//! drops it.

mod client;
mod server;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::{one_shot, HttpConnection, HttpReply, Method};
pub use server::{ConnId, HttpServer};

/// Emulated per-operation costs of the hardware a node runs on.
///
/// A cost blocks the calling runtime worker for its duration, so a node
/// configured with a single worker thread serializes all of its network
/// activity behind these costs the way a slow device would.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Charged once for every TCP connection opened or accepted.
    #[serde(default)]
    pub connection_cost_us: u64,
    /// Charged for every HTTP request served or response consumed.
    #[serde(default)]
    pub request_cost_us: u64,
}

impl DeviceProfile {
    pub fn unconstrained() -> Self {
        Self::default()
    }

    pub fn charge_connection(&self) {
        block_for(self.connection_cost_us);
    }

    pub fn charge_request(&self) {
        block_for(self.request_cost_us);
    }
}

fn block_for(us: u64) {
    if us > 0 {
        std::thread::sleep(Duration::from_micros(us));
    }
}

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
