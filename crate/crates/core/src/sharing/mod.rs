//! Answering peers: one-off queries and streaming subscriptions.
//!
//! The owner of a sensor keeps one [`Subscription`] per interested peer. A
//! per-subscription tick loop moves new history records into the pending
//! buffer. Push subscriptions then POST the buffer to the peer's callback on a
//! fresh connection; restful subscriptions wait for the peer to pull over its
//! held session, acknowledging what it has via a timestamp cursor.

pub mod remote;

use std::collections::{BTreeMap, HashSet};
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;
use tracing::debug;

use crate::clock::SharedClock;
use crate::engine::Engine;
use crate::error::{EngineError, Result};
use crate::net::{ConnId, DeviceProfile, HttpConnection, Method};
use crate::ring::BoundedQueue;
use crate::storage::HistoryStore;
use crate::types::{FieldSpec, NodeId, RequestId, SensorName, StreamElement, SubscriptionId, TimestampMs};
use crate::wire;

pub const DEFAULT_BUFFER_CAPACITY: usize = 1000;
pub const HEARTBEAT: Duration = Duration::from_secs(30);
pub const PUSH_TIMEOUT: Duration = Duration::from_secs(5);
const BACKOFF_INITIAL_MS: u64 = 1000;
const BACKOFF_MAX_MS: u64 = 32_000;
/// A restful subscription with no pull for this many intervals is Disconnected.
const MISSED_PULLS: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Restful,
    Push,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Restful => "restful",
            Mode::Push => "push",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restful" => Ok(Mode::Restful),
            "push" => Ok(Mode::Push),
            _ => Err(EngineError::invalid_query(format!("mode: `{s}` is not restful or push"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubscriptionState {
    Active,
    Disconnected,
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "count")]
pub enum DeliveryOutcome {
    Delivered(usize),
    Buffered(usize),
    Dropped(usize),
}

/// Exponential backoff, 1 s doubling to a 32 s cap, each delay drawn from
/// `[0.8·d, d]`.
#[derive(Debug, Clone, Default)]
pub struct Backoff {
    failures: u32,
}

impl Backoff {
    pub fn failures(&self) -> u32 {
        self.failures
    }

    /// Nominal delay after the current run of failures, before jitter.
    pub fn nominal_ms(&self) -> u64 {
        if self.failures == 0 {
            return 0;
        }
        BACKOFF_INITIAL_MS
            .saturating_mul(1u64 << (self.failures - 1).min(16))
            .min(BACKOFF_MAX_MS)
    }

    /// Records a failure and returns the jittered delay before the next try.
    pub fn fail(&mut self) -> u64 {
        self.failures = self.failures.saturating_add(1);
        let d = self.nominal_ms();
        rand::rng().random_range(d * 4 / 5..=d)
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionCounters {
    /// Records moved into the pending buffer.
    pub enqueued: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub reconnects: u64,
    /// Push: connections opened for deliveries. Restful: distinct sessions seen.
    pub connections: u64,
    pub attempts: u64,
}

/// Peer's request to subscribe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub sensor: SensorName,
    pub mode: Mode,
    pub interval_ms: u64,
    /// Identity of the subscribing peer (node id or address).
    pub peer: String,
    /// `host:port` receiving push deliveries.
    #[serde(default)]
    pub callback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionInfo {
    pub id: SubscriptionId,
    pub peer: String,
    pub sensor: SensorName,
    pub mode: Mode,
    pub interval_ms: u64,
    pub callback: Option<String>,
    pub state: SubscriptionState,
    pub pending: usize,
    pub capacity: usize,
    pub counters: SubscriptionCounters,
    pub output: Vec<FieldSpec>,
}

/// Body of one push delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushDelivery {
    pub subscription_id: SubscriptionId,
    /// Owner clock when the delivery was attempted.
    pub issued_at: TimestampMs,
    pub elements: Vec<StreamElement>,
}

/// Reply to one restful pull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBatch {
    /// True when the wait ended without new data.
    pub heartbeat: bool,
    pub elements: Vec<StreamElement>,
}

struct Inner {
    state: SubscriptionState,
    pending: BoundedQueue<StreamElement>,
    last_enqueued: Option<TimestampMs>,
    counters: SubscriptionCounters,
    sessions: HashSet<ConnId>,
    last_pull_ms: TimestampMs,
    parked: u32,
    backoff: Backoff,
    next_attempt_ms: TimestampMs,
}

/// Owner-side state of one peer's interest in one sensor.
pub struct Subscription {
    pub id: SubscriptionId,
    pub peer: String,
    pub sensor: SensorName,
    pub mode: Mode,
    pub interval_ms: u64,
    pub callback: Option<String>,
    output: Vec<FieldSpec>,
    inner: Mutex<Inner>,
    wake: Notify,
}

impl Subscription {
    pub fn new(id: SubscriptionId, req: SubscribeRequest, output: Vec<FieldSpec>, capacity: usize, now: TimestampMs) -> Self {
        Self {
            id,
            peer: req.peer,
            sensor: req.sensor,
            mode: req.mode,
            interval_ms: req.interval_ms,
            callback: req.callback,
            output,
            inner: Mutex::new(Inner {
                state: SubscriptionState::Active,
                pending: BoundedQueue::new(capacity.max(1)),
                last_enqueued: None,
                counters: SubscriptionCounters::default(),
                sessions: HashSet::new(),
                last_pull_ms: now,
                parked: 0,
                backoff: Backoff::default(),
                next_attempt_ms: TimestampMs::MIN,
            }),
            wake: Notify::new(),
        }
    }

    /// Starts the buffer after `ts`: earlier records are never delivered.
    pub fn start_after(&self, ts: Option<TimestampMs>) {
        self.inner.lock().last_enqueued = ts;
    }

    pub fn info(&self) -> SubscriptionInfo {
        let g = self.inner.lock();
        SubscriptionInfo {
            id: self.id.clone(),
            peer: self.peer.clone(),
            sensor: self.sensor.clone(),
            mode: self.mode,
            interval_ms: self.interval_ms,
            callback: self.callback.clone(),
            state: g.state,
            pending: g.pending.len(),
            capacity: g.pending.capacity(),
            counters: g.counters,
            output: self.output.clone(),
        }
    }

    pub fn state(&self) -> SubscriptionState {
        self.inner.lock().state
    }

    pub fn last_enqueued(&self) -> Option<TimestampMs> {
        self.inner.lock().last_enqueued
    }

    /// Moves records newer than the last enqueued one into the buffer.
    /// Returns (added, evicted).
    pub fn enqueue(&self, elements: impl IntoIterator<Item = StreamElement>) -> (usize, usize) {
        let mut g = self.inner.lock();
        if g.state == SubscriptionState::Cancelled {
            return (0, 0);
        }
        let (mut added, mut evicted) = (0, 0);
        for e in elements {
            if g.last_enqueued.is_some_and(|t| e.ts <= t) {
                continue;
            }
            g.last_enqueued = Some(e.ts);
            added += 1;
            if g.pending.push(e).is_some() {
                evicted += 1;
            }
        }
        g.counters.enqueued += added as u64;
        g.counters.dropped += evicted as u64;
        drop(g);
        if added > 0 {
            self.wake.notify_waiters();
        }
        (added, evicted)
    }

    /// One delivery step at time `at`. New records go into the buffer first.
    /// A push subscription outside its backoff window then hands the whole
    /// buffer to `send`, which stands for one delivery on a fresh connection.
    pub async fn deliver_tick<F, Fut>(&self, at: TimestampMs, new: Vec<StreamElement>, send: F) -> DeliveryOutcome
    where
        F: FnOnce(Vec<StreamElement>) -> Fut,
        Fut: Future<Output = Result<()>>,
    {
        let (_, evicted) = self.enqueue(new);
        let batch = {
            let mut g = self.inner.lock();
            match g.state {
                SubscriptionState::Cancelled => return DeliveryOutcome::Buffered(0),
                _ if self.mode == Mode::Restful => {
                    if g.parked > 0 {
                        g.last_pull_ms = at;
                    }
                    if g.state == SubscriptionState::Active
                        && g.parked == 0
                        && at - g.last_pull_ms > MISSED_PULLS * self.interval_ms as i64
                    {
                        g.state = SubscriptionState::Disconnected;
                    }
                    None
                }
                _ if g.pending.is_empty() || at < g.next_attempt_ms => None,
                _ => {
                    g.counters.attempts += 1;
                    g.counters.connections += 1;
                    Some(g.pending.iter().cloned().collect::<Vec<_>>())
                }
            }
        };
        let Some(batch) = batch else {
            return self.undelivered(evicted);
        };
        let last = batch.last().map(|e| e.ts).expect("batch is non-empty");
        let sent = send(batch).await;
        let mut g = self.inner.lock();
        if g.state == SubscriptionState::Cancelled {
            return DeliveryOutcome::Buffered(0);
        }
        match sent {
            Ok(()) => {
                let n = g.pending.drain_front_while(|e| e.ts <= last);
                g.counters.delivered += n as u64;
                if g.state == SubscriptionState::Disconnected {
                    g.counters.reconnects += 1;
                }
                g.state = SubscriptionState::Active;
                g.backoff.reset();
                g.next_attempt_ms = TimestampMs::MIN;
                DeliveryOutcome::Delivered(n)
            }
            Err(e) => {
                debug!(subscription = %self.id, error = %e, "push failed");
                g.state = SubscriptionState::Disconnected;
                let delay = g.backoff.fail();
                g.next_attempt_ms = at.saturating_add(delay as i64);
                drop(g);
                self.undelivered(evicted)
            }
        }
    }

    fn undelivered(&self, evicted: usize) -> DeliveryOutcome {
        if evicted > 0 {
            DeliveryOutcome::Dropped(evicted)
        } else {
            DeliveryOutcome::Buffered(self.inner.lock().pending.len())
        }
    }

    /// Handles one restful pull: acknowledges everything up to `after`, then
    /// returns buffered records newer than it, waiting for some to arrive if
    /// there are none. `refill` is polled for new records while waiting.
    pub async fn pull(
        &self,
        after: Option<TimestampMs>,
        conn: Option<ConnId>,
        now: TimestampMs,
        heartbeat: Duration,
        mut refill: impl FnMut() -> Vec<StreamElement>,
        mut appended: Option<watch::Receiver<Option<TimestampMs>>>,
    ) -> Result<StreamBatch> {
        {
            let mut g = self.inner.lock();
            if g.state == SubscriptionState::Cancelled {
                return Err(EngineError::not_found(format!("subscription `{}` is cancelled", self.id)));
            }
            if let Some(c) = conn {
                if g.sessions.insert(c) {
                    g.counters.connections += 1;
                }
            }
            if g.state == SubscriptionState::Disconnected {
                g.counters.reconnects += 1;
            }
            g.state = SubscriptionState::Active;
            g.last_pull_ms = now;
            if let Some(a) = after {
                let n = g.pending.drain_front_while(|e| e.ts <= a);
                g.counters.delivered += n as u64;
            }
        }
        let _parked = Parked::new(self);
        let deadline = tokio::time::Instant::now() + heartbeat;
        loop {
            if let Some(w) = appended.as_mut() {
                w.borrow_and_update();
            }
            self.enqueue(refill());
            {
                let g = self.inner.lock();
                if g.state == SubscriptionState::Cancelled {
                    return Err(EngineError::not_found(format!("subscription `{}` is cancelled", self.id)));
                }
                let elements: Vec<StreamElement> = g
                    .pending
                    .iter()
                    .filter(|e| after.is_none_or(|a| e.ts > a))
                    .cloned()
                    .collect();
                if !elements.is_empty() {
                    return Ok(StreamBatch {
                        heartbeat: false,
                        elements,
                    });
                }
            }
            let woke = self.wake.notified();
            let changed = async {
                let ok = match appended.as_mut() {
                    Some(w) => w.changed().await.is_ok(),
                    None => false,
                };
                if !ok {
                    std::future::pending::<()>().await;
                }
            };
            tokio::select! {
                _ = woke => {}
                _ = changed => {}
                _ = tokio::time::sleep_until(deadline) => {
                    return Ok(StreamBatch { heartbeat: true, elements: Vec::new() });
                }
            }
        }
    }

    pub fn cancel(&self) {
        let mut g = self.inner.lock();
        g.state = SubscriptionState::Cancelled;
        g.pending.clear();
        drop(g);
        self.wake.notify_waiters();
    }
}

/// Counts a pull as in progress for as long as it lives.
struct Parked<'a>(&'a Subscription);

impl<'a> Parked<'a> {
    fn new(sub: &'a Subscription) -> Self {
        sub.inner.lock().parked += 1;
        Self(sub)
    }
}

impl Drop for Parked<'_> {
    fn drop(&mut self) {
        self.0.inner.lock().parked -= 1;
    }
}

/// Kinds of one-off query a peer can make.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryKind {
    Latest,
    Range { from: TimestampMs, to: TimestampMs },
    SensorList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub id: RequestId,
    pub sensor: Option<SensorName>,
    pub kind: QueryKind,
    pub origin: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub name: SensorName,
    pub output: Vec<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryResult {
    Elements(Vec<StreamElement>),
    Sensors(Vec<SensorInfo>),
}

/// Owner-side query and subscription service of one node.
pub struct SharingService {
    engine: Arc<Engine>,
    clock: SharedClock,
    id_prefix: String,
    capacity: usize,
    profile: DeviceProfile,
    heartbeat: Duration,
    next_id: AtomicU64,
    subs: RwLock<BTreeMap<SubscriptionId, Arc<Subscription>>>,
    tasks: Mutex<BTreeMap<SubscriptionId, JoinHandle<()>>>,
}

impl SharingService {
    /// Subscription ids are `<id_prefix>.sub-<n>`, so a node id as prefix makes
    /// them unique across nodes.
    pub fn new(engine: Arc<Engine>, id_prefix: &str, capacity: usize, profile: DeviceProfile) -> Self {
        let clock = engine.clock().clone();
        Self {
            engine,
            clock,
            id_prefix: id_prefix.to_owned(),
            capacity: capacity.max(1),
            profile,
            heartbeat: HEARTBEAT,
            next_id: AtomicU64::new(1),
            subs: RwLock::default(),
            tasks: Mutex::default(),
        }
    }

    pub fn with_heartbeat(mut self, heartbeat: Duration) -> Self {
        self.heartbeat = heartbeat;
        self
    }

    fn storage(&self) -> &Arc<HistoryStore> {
        self.engine.storage()
    }

    /// The live sensors of this node with their output structures.
    pub fn sensor_list(&self) -> Vec<SensorInfo> {
        self.engine
            .list()
            .into_iter()
            .map(|s| SensorInfo {
                name: s.config.name,
                output: s.config.output,
            })
            .collect()
    }

    pub fn resolve_query(&self, q: &QueryRequest) -> Result<QueryResult> {
        let sensor = || {
            q.sensor
                .as_ref()
                .ok_or_else(|| EngineError::invalid_query("sensor: required for this query kind"))
        };
        match q.kind {
            QueryKind::SensorList => Ok(QueryResult::Sensors(self.sensor_list())),
            QueryKind::Latest => Ok(QueryResult::Elements(self.storage().latest(sensor()?)?.into_iter().collect())),
            QueryKind::Range { from, to } => Ok(QueryResult::Elements(self.storage().range(sensor()?, from, to)?)),
        }
    }

    pub fn subscribe(self: &Arc<Self>, req: SubscribeRequest) -> Result<SubscriptionInfo> {
        if req.interval_ms == 0 {
            return Err(EngineError::invalid_query("interval_ms: must be at least 1"));
        }
        if req.mode == Mode::Push && req.callback.is_none() {
            return Err(EngineError::invalid_query("callback: required for push subscriptions"));
        }
        let state = self.engine.state(&req.sensor)?;
        let mut subs = self.subs.write();
        if subs.values().any(|s| {
            s.peer == req.peer && s.sensor == req.sensor && s.mode == req.mode && s.state() != SubscriptionState::Cancelled
        }) {
            return Err(EngineError::conflict(format!(
                "peer `{}` already has a {} subscription to `{}`",
                req.peer, req.mode, req.sensor
            )));
        }
        let id: SubscriptionId = format!("{}.sub-{}", self.id_prefix, self.next_id.fetch_add(1, Ordering::Relaxed))
            .parse()
            .expect("generated id is valid");
        let now = self.clock.now_ms();
        let sub = Arc::new(Subscription::new(id.clone(), req, state.config.output, self.capacity, now));
        // Only records sampled after subscribing are streamed.
        sub.start_after(self.storage().latest(&sub.sensor)?.map(|e| e.ts));
        subs.insert(id.clone(), sub.clone());
        drop(subs);
        let task = tokio::spawn(tick_loop(sub.clone(), self.storage().clone(), self.clock.clone(), self.profile));
        self.tasks.lock().insert(id, task);
        Ok(sub.info())
    }

    pub fn cancel(&self, id: &SubscriptionId) -> Result<()> {
        let sub = self
            .subs
            .write()
            .remove(id)
            .ok_or_else(|| EngineError::not_found(format!("no subscription `{id}`")))?;
        sub.cancel();
        if let Some(t) = self.tasks.lock().remove(id) {
            t.abort();
        }
        Ok(())
    }

    pub fn cancel_all(&self) {
        let ids: Vec<_> = self.subs.read().keys().cloned().collect();
        for id in ids {
            let _ = self.cancel(&id);
        }
    }

    pub fn get(&self, id: &SubscriptionId) -> Result<Arc<Subscription>> {
        self.subs
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::not_found(format!("no subscription `{id}`")))
    }

    pub fn list(&self) -> Vec<SubscriptionInfo> {
        self.subs.read().values().map(|s| s.info()).collect()
    }

    /// Serves one restful pull on subscription `id`.
    pub async fn pull(&self, id: &SubscriptionId, after: Option<TimestampMs>, conn: Option<ConnId>) -> Result<StreamBatch> {
        let sub = self.get(id)?;
        if sub.mode != Mode::Restful {
            return Err(EngineError::invalid_query(format!("subscription `{id}` is push mode")));
        }
        let storage = self.storage().clone();
        let watch = storage.watch(&sub.sensor)?;
        let sensor = sub.sensor.clone();
        let sub2 = sub.clone();
        let refill = move || {
            let from = sub2.last_enqueued().unwrap_or(TimestampMs::MIN);
            storage.newer_than(&sensor, from).unwrap_or_default()
        };
        sub.pull(after, conn, self.clock.now_ms(), self.heartbeat, refill, Some(watch)).await
    }
}

impl Drop for SharingService {
    fn drop(&mut self) {
        for (_, t) in std::mem::take(&mut *self.tasks.lock()) {
            t.abort();
        }
    }
}

async fn tick_loop(sub: Arc<Subscription>, storage: Arc<HistoryStore>, clock: SharedClock, profile: DeviceProfile) {
    let period = Duration::from_millis(sub.interval_ms);
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);
    loop {
        ticker.tick().await;
        if sub.state() == SubscriptionState::Cancelled {
            break;
        }
        let from = sub.last_enqueued().unwrap_or(TimestampMs::MIN);
        let new = storage.newer_than(&sub.sensor, from).unwrap_or_default();
        let at = clock.now_ms();
        let callback = sub.callback.clone();
        let id = sub.id.clone();
        sub.deliver_tick(at, new, |elements| async move {
            let callback = callback.expect("push subscriptions have a callback");
            push_once(&callback, &id, at, elements, profile).await
        })
        .await;
    }
}

/// One push delivery on a fresh connection.
pub async fn push_once(
    callback: &str,
    id: &SubscriptionId,
    issued_at: TimestampMs,
    elements: Vec<StreamElement>,
    profile: DeviceProfile,
) -> Result<()> {
    let body = wire::encode(&PushDelivery {
        subscription_id: id.clone(),
        issued_at,
        elements,
    });
    let mut conn = HttpConnection::open(callback, profile).await?;
    conn.send(Method::Post, &format!("/v1/push/{id}"), Some(body), PUSH_TIMEOUT)
        .await?
        .ok()
}
