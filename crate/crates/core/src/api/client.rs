use std::time::Duration;

use crate::error::{EngineError, Result};
use crate::net::{DeviceProfile, HttpConnection, HttpReply, Method};
use crate::sharing::SensorInfo;
use crate::types::{SensorName, StreamElement, TimestampMs};

const QUERY_TIMEOUT: Duration = Duration::from_secs(5);

/// Queries one peer over a held connection, reopening it when it breaks.
pub struct PeerClient {
    addr: String,
    profile: DeviceProfile,
    conn: Option<HttpConnection>,
    opened: u64,
}

impl PeerClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            profile: DeviceProfile::unconstrained(),
            conn: None,
            opened: 0,
        }
    }

    pub fn with_profile(mut self, profile: DeviceProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Connections opened so far.
    pub fn connections_opened(&self) -> u64 {
        self.opened
    }

    async fn send(&mut self, method: Method, path: &str, body: Option<Vec<u8>>) -> Result<HttpReply> {
        if self.conn.as_ref().is_none_or(|c| c.is_closed()) {
            self.conn = Some(HttpConnection::open(&self.addr, self.profile).await?);
            self.opened += 1;
        }
        let r = self
            .conn
            .as_mut()
            .expect("connection is open")
            .send(method, path, body, QUERY_TIMEOUT)
            .await;
        if r.is_err() {
            self.conn = None;
        }
        r
    }

    pub async fn sensors(&mut self) -> Result<Vec<SensorInfo>> {
        self.send(Method::Get, "/v1/sensors", None).await?.json()
    }

    /// The peer's newest record of `sensor`; NotFound if it has none yet.
    pub async fn latest(&mut self, sensor: &SensorName) -> Result<StreamElement> {
        let r = self.send(Method::Get, &format!("/v1/sensors/{sensor}/latest"), None).await?;
        if r.status == 204 {
            return Err(EngineError::not_found(format!("`{sensor}` has no records yet")));
        }
        r.json()
    }

    pub async fn range(&mut self, sensor: &SensorName, from: TimestampMs, to: TimestampMs) -> Result<Vec<StreamElement>> {
        self.send(Method::Get, &format!("/v1/sensors/{sensor}/range?from={from}&to={to}"), None)
            .await?
            .json()
    }
}

/// One-off fetch of the newest record of `sensor` on the peer at `addr`.
pub async fn remote_pull(addr: &str, sensor: &SensorName) -> Result<StreamElement> {
    PeerClient::new(addr).latest(sensor).await
}
