//! The consuming side of subscriptions: data this node requests from peers.
//!
//! Each remote request is one subscription on a peer. Restful requests run a
//! pull loop over one held connection, ticking at the delivery interval;
//! push requests wait for the peer's deliveries. Received records are deduped
//! by timestamp, stored in a local `remote-<request>` table and every
//! completed round trip is logged.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;
use tracing::{debug, warn};

use super::{Backoff, Mode, PushDelivery, StreamBatch, SubscribeRequest, SubscriptionInfo, HEARTBEAT};
use crate::clock::SharedClock;
use crate::error::{EngineError, ErrorKind, Result};
use crate::net::{one_shot, DeviceProfile, HttpConnection, Method};
use crate::storage::HistoryStore;
use crate::types::{NodeId, RequestId, SensorName, StreamElement, SubscriptionId, TimestampMs};
use crate::wire;

/// Records kept per remote request in its local table.
pub const RECEIVED_HISTORY: usize = 1000;
const CONTROL_TIMEOUT: Duration = Duration::from_secs(5);

/// One completed request/response exchange that brought new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub request_id: RequestId,
    pub sensor: SensorName,
    pub mode: Mode,
    /// Restful: when the pull was sent. Push: when the owner attempted delivery.
    pub issued_ms: TimestampMs,
    pub received_ms: TimestampMs,
    pub latency_ms: i64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequestInfo {
    pub request_id: RequestId,
    pub owner: String,
    pub sensor: SensorName,
    pub mode: Mode,
    pub interval_ms: u64,
    pub subscription_id: SubscriptionId,
    pub table: SensorName,
    pub received: u64,
    pub round_trips: u64,
    pub duplicates: u64,
    pub connections: u64,
    pub reconnects: u64,
    pub failures: u64,
    pub last_ts: Option<TimestampMs>,
}

struct RemoteRequest {
    info: Mutex<RemoteRequestInfo>,
}

/// Remote requests of one node.
pub struct RemoteRequests {
    node_id: NodeId,
    callback: RwLock<Option<String>>,
    storage: Arc<HistoryStore>,
    clock: SharedClock,
    profile: DeviceProfile,
    next_id: AtomicU64,
    reqs: RwLock<BTreeMap<RequestId, Arc<RemoteRequest>>>,
    by_sub: RwLock<BTreeMap<SubscriptionId, RequestId>>,
    tasks: Mutex<BTreeMap<RequestId, JoinHandle<()>>>,
    log: Mutex<Vec<RoundTrip>>,
    offline_until: watch::Sender<TimestampMs>,
}

impl RemoteRequests {
    pub fn new(node_id: NodeId, storage: Arc<HistoryStore>, clock: SharedClock, profile: DeviceProfile) -> Self {
        Self {
            node_id,
            callback: RwLock::new(None),
            storage,
            clock,
            profile,
            next_id: AtomicU64::new(1),
            reqs: RwLock::default(),
            by_sub: RwLock::default(),
            tasks: Mutex::default(),
            log: Mutex::default(),
            offline_until: watch::channel(TimestampMs::MIN).0,
        }
    }

    /// Address peers should push to; set once this node listens.
    pub fn set_callback(&self, addr: String) {
        *self.callback.write() = Some(addr);
    }

    /// Subscribes to `sensor` on the peer at `owner`.
    pub async fn acquire(self: &Arc<Self>, owner: &str, sensor: SensorName, mode: Mode, interval_ms: u64) -> Result<RemoteRequestInfo> {
        let sub = self.subscribe_on_owner(owner, &sensor, mode, interval_ms).await?;
        let request_id: RequestId = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed))
            .parse()
            .expect("generated id is valid");
        let table: SensorName = format!("remote-{request_id}").parse().expect("generated name is valid");
        self.storage.ensure_table(&table, &sub.output, RECEIVED_HISTORY)?;
        let req = Arc::new(RemoteRequest {
            info: Mutex::new(RemoteRequestInfo {
                request_id: request_id.clone(),
                owner: owner.to_owned(),
                sensor,
                mode,
                interval_ms,
                subscription_id: sub.id.clone(),
                table,
                received: 0,
                round_trips: 0,
                duplicates: 0,
                connections: 0,
                reconnects: 0,
                failures: 0,
                last_ts: None,
            }),
        });
        self.by_sub.write().insert(sub.id, request_id.clone());
        self.reqs.write().insert(request_id.clone(), req.clone());
        if mode == Mode::Restful {
            let task = tokio::spawn(pull_loop(self.clone(), req.clone()));
            self.tasks.lock().insert(request_id, task);
        }
        let info = req.info.lock().clone();
        Ok(info)
    }

    async fn subscribe_on_owner(&self, owner: &str, sensor: &SensorName, mode: Mode, interval_ms: u64) -> Result<SubscriptionInfo> {
        let callback = match mode {
            Mode::Push => Some(
                self.callback
                    .read()
                    .clone()
                    .ok_or_else(|| EngineError::shutdown("node is not listening for push deliveries"))?,
            ),
            Mode::Restful => None,
        };
        let body = wire::encode(&SubscribeRequest {
            sensor: sensor.clone(),
            mode,
            interval_ms,
            peer: self.node_id.to_string(),
            callback,
        });
        one_shot(owner, Method::Post, "/v1/subscriptions", Some(body), self.profile, CONTROL_TIMEOUT)
            .await?
            .json()
    }

    /// Cancels the request here and on its owner.
    pub async fn release(&self, id: &RequestId) -> Result<()> {
        let req = self
            .reqs
            .write()
            .remove(id)
            .ok_or_else(|| EngineError::not_found(format!("no remote request `{id}`")))?;
        if let Some(t) = self.tasks.lock().remove(id) {
            t.abort();
        }
        let (owner, sub) = {
            let i = req.info.lock();
            (i.owner.clone(), i.subscription_id.clone())
        };
        self.by_sub.write().remove(&sub);
        one_shot(
            &owner,
            Method::Delete,
            &format!("/v1/subscriptions/{sub}"),
            None,
            self.profile,
            CONTROL_TIMEOUT,
        )
        .await?
        .ok()
    }

    pub async fn release_all(&self) {
        let ids: Vec<_> = self.reqs.read().keys().cloned().collect();
        for id in ids {
            if let Err(e) = self.release(&id).await {
                debug!(request = %id, error = %e, "release failed");
            }
        }
    }

    /// Accepts one push delivery.
    pub fn receive_push(&self, delivery: PushDelivery) -> Result<usize> {
        if self.is_offline() {
            return Err(EngineError::shutdown("node is offline"));
        }
        let rid = self
            .by_sub
            .read()
            .get(&delivery.subscription_id)
            .cloned()
            .ok_or_else(|| EngineError::not_found(format!("no remote request for `{}`", delivery.subscription_id)))?;
        let req = self
            .reqs
            .read()
            .get(&rid)
            .cloned()
            .ok_or_else(|| EngineError::not_found(format!("no remote request `{rid}`")))?;
        Ok(self.accept(&req, delivery.issued_at, delivery.elements))
    }

    /// Stores the new records of one exchange and logs the round trip.
    fn accept(&self, req: &RemoteRequest, issued_ms: TimestampMs, elements: Vec<StreamElement>) -> usize {
        let received_ms = self.clock.now_ms();
        let mut info = req.info.lock();
        let mut fresh = 0;
        for e in elements {
            if info.last_ts.is_some_and(|t| e.ts <= t) {
                info.duplicates += 1;
                continue;
            }
            let ts = e.ts;
            if let Err(err) = self.storage.append(&info.table, e) {
                warn!(request = %info.request_id, error = %err, "received record rejected");
                continue;
            }
            info.last_ts = Some(ts);
            info.received += 1;
            fresh += 1;
        }
        if fresh > 0 {
            info.round_trips += 1;
            self.log.lock().push(RoundTrip {
                request_id: info.request_id.clone(),
                sensor: info.sensor.clone(),
                mode: info.mode,
                issued_ms,
                received_ms,
                latency_ms: (received_ms - issued_ms).max(0),
                elements: fresh,
            });
        }
        fresh
    }

    pub fn get(&self, id: &RequestId) -> Result<RemoteRequestInfo> {
        self.reqs
            .read()
            .get(id)
            .map(|r| r.info.lock().clone())
            .ok_or_else(|| EngineError::not_found(format!("no remote request `{id}`")))
    }

    pub fn list(&self) -> Vec<RemoteRequestInfo> {
        self.reqs.read().values().map(|r| r.info.lock().clone()).collect()
    }

    pub fn round_trips(&self) -> Vec<RoundTrip> {
        self.log.lock().clone()
    }

    /// Drops held sessions and pauses pulling for `period`.
    pub fn go_offline(&self, period: Duration) {
        let until = self.clock.now_ms() + period.as_millis() as i64;
        self.offline_until.send_replace(until);
    }

    pub fn is_offline(&self) -> bool {
        self.clock.now_ms() < *self.offline_until.borrow()
    }
}

impl Drop for RemoteRequests {
    fn drop(&mut self) {
        for (_, t) in std::mem::take(&mut *self.tasks.lock()) {
            t.abort();
        }
    }
}

/// Margin a pull leaves after an expected sample for sampling jitter.
fn phase_slack(interval_ms: u64) -> i64 {
    (interval_ms / 20).clamp(2, 50) as i64
}

async fn pull_loop(this: Arc<RemoteRequests>, req: Arc<RemoteRequest>) {
    let (owner, interval_ms) = {
        let i = req.info.lock();
        (i.owner.clone(), i.interval_ms)
    };
    let mut offline = this.offline_until.subscribe();
    let mut ticker = tokio::time::interval(Duration::from_millis(interval_ms));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let mut conn: Option<HttpConnection> = None;
    let mut backoff = Backoff::default();
    let mut retry_at = TimestampMs::MIN;
    let mut had_session = false;
    loop {
        ticker.tick().await;
        offline.borrow_and_update();
        let now = this.clock.now_ms();
        if this.is_offline() {
            conn = None;
            continue;
        }
        if conn.as_ref().is_none_or(|c| c.is_closed()) {
            if now < retry_at {
                continue;
            }
            match HttpConnection::open(&owner, this.profile).await {
                Ok(c) => {
                    let mut i = req.info.lock();
                    i.connections += 1;
                    if had_session {
                        i.reconnects += 1;
                    }
                    had_session = true;
                    conn = Some(c);
                }
                Err(e) => {
                    req.info.lock().failures += 1;
                    retry_at = now + backoff.fail() as i64;
                    debug!(%owner, error = %e, "session open failed");
                    continue;
                }
            }
        }
        let (sub, after) = {
            let i = req.info.lock();
            (i.subscription_id.clone(), i.last_ts)
        };
        let path = match after {
            Some(a) => format!("/v1/subscriptions/{sub}/stream?after={a}"),
            None => format!("/v1/subscriptions/{sub}/stream"),
        };
        let issued = this.clock.now_ms();
        let c = conn.as_mut().expect("session is open");
        let reply = tokio::select! {
            r = c.send(Method::Get, &path, None, HEARTBEAT + CONTROL_TIMEOUT) => r,
            _ = offline.changed() => {
                conn = None;
                continue;
            }
        };
        match reply.and_then(|r| r.json::<StreamBatch>()) {
            Ok(batch) => {
                backoff.reset();
                if !batch.heartbeat {
                    let newest = batch.elements.last().map(|e| e.ts);
                    this.accept(&req, issued, batch.elements);
                    if let Some(ts) = newest {
                        // Next pull just after the owner's next sample is due.
                        let due = ts + interval_ms as i64 + phase_slack(interval_ms) - this.clock.now_ms();
                        ticker.reset_after(Duration::from_millis(due.clamp(0, interval_ms as i64) as u64));
                    }
                }
            }
            Err(e) if e.kind == ErrorKind::NotFound => {
                // The owner lost the subscription (restart); ask again.
                let (sensor, mode) = {
                    let i = req.info.lock();
                    (i.sensor.clone(), i.mode)
                };
                match this.subscribe_on_owner(&owner, &sensor, mode, interval_ms).await {
                    Ok(s) => {
                        let mut by_sub = this.by_sub.write();
                        let mut i = req.info.lock();
                        by_sub.remove(&i.subscription_id);
                        by_sub.insert(s.id.clone(), i.request_id.clone());
                        i.subscription_id = s.id;
                        i.reconnects += 1;
                    }
                    Err(e) => {
                        req.info.lock().failures += 1;
                        retry_at = this.clock.now_ms() + backoff.fail() as i64;
                        debug!(%owner, error = %e, "resubscribe failed");
                    }
                }
            }
            Err(e) => {
                req.info.lock().failures += 1;
                conn = None;
                retry_at = this.clock.now_ms() + backoff.fail() as i64;
                debug!(%owner, error = %e, "pull failed");
            }
        }
    }
}
