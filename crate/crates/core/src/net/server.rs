use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::Request;
use hyper_util::rt::TokioIo;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tokio::task::{JoinHandle, JoinSet};
use tower::ServiceExt;
use tracing::{debug, warn};

use super::DeviceProfile;
use crate::error::{EngineError, Result};

/// Sequence number of the TCP connection a request arrived on, starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConnId(pub u64);

const DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

enum Control {
    Offline(Duration),
}

/// A running listener serving an axum router over hand-accepted connections.
pub struct HttpServer {
    local_addr: SocketAddr,
    accepted: Arc<AtomicU64>,
    shutdown: watch::Sender<bool>,
    control: mpsc::UnboundedSender<Control>,
    task: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub async fn start(bind: SocketAddr, router: Router, profile: DeviceProfile) -> Result<Self> {
        let listener = TcpListener::bind(bind)
            .await
            .map_err(|e| EngineError::shutdown(format!("cannot listen on {bind}: {e}")))?;
        let local_addr = listener
            .local_addr()
            .map_err(|e| EngineError::shutdown(e.to_string()))?;
        let accepted = Arc::new(AtomicU64::new(0));
        let (shutdown, shutdown_rx) = watch::channel(false);
        let (control, control_rx) = mpsc::unbounded_channel();
        let task = tokio::spawn(accept_loop(
            listener,
            local_addr,
            router,
            profile,
            accepted.clone(),
            shutdown_rx,
            control_rx,
        ));
        Ok(Self {
            local_addr,
            accepted,
            shutdown,
            control,
            task: Some(task),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Connections accepted since start.
    pub fn connections_accepted(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    /// Live view of the accepted-connection count.
    pub fn accepted_counter(&self) -> Arc<AtomicU64> {
        self.accepted.clone()
    }

    /// Closes the listening socket and every open connection, then listens
    /// again on the same address after `period`.
    pub fn go_offline(&self, period: Duration) {
        let _ = self.control.send(Control::Offline(period));
    }

    /// A receiver that flips to `true` once shutdown starts.
    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shutdown.subscribe()
    }

    /// Stops accepting, lets in-flight requests finish for up to 5 s, then
    /// aborts whatever is left.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

async fn accept_loop(
    listener: TcpListener,
    local_addr: SocketAddr,
    router: Router,
    profile: DeviceProfile,
    accepted: Arc<AtomicU64>,
    mut shutdown_rx: watch::Receiver<bool>,
    mut control_rx: mpsc::UnboundedReceiver<Control>,
) {
    let mut listener = Some(listener);
    let mut conns = JoinSet::new();
    // Per-connection drain signal, replaced after every offline period.
    let (mut drain_tx, mut drain_rx) = watch::channel(false);

    loop {
        let Some(l) = listener.as_ref() else { break };
        tokio::select! {
            _ = shutdown_rx.changed() => break,
            Some(Control::Offline(period)) = control_rx.recv() => {
                debug!(%local_addr, ?period, "going offline");
                drop(listener.take());
                conns.abort_all();
                while conns.join_next().await.is_some() {}
                tokio::select! {
                    _ = tokio::time::sleep(period) => {}
                    _ = shutdown_rx.changed() => return,
                }
                match TcpListener::bind(local_addr).await {
                    Ok(l) => listener = Some(l),
                    Err(e) => {
                        warn!(%local_addr, error = %e, "cannot listen again after offline period");
                        return;
                    }
                }
                (drain_tx, drain_rx) = watch::channel(false);
            }
            res = l.accept() => {
                let (stream, _) = match res {
                    Ok(s) => s,
                    Err(e) => {
                        warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                let id = ConnId(accepted.fetch_add(1, Ordering::Relaxed) + 1);
                profile.charge_connection();
                let _ = stream.set_nodelay(true);
                let router = router.clone();
                let mut drain = drain_rx.clone();
                conns.spawn(async move {
                    let svc = service_fn(move |mut req: Request<Incoming>| {
                        req.extensions_mut().insert(id);
                        let router = router.clone();
                        async move {
                            profile.charge_request();
                            Ok::<_, Infallible>(router.oneshot(req).await.unwrap_or_else(|e| match e {}))
                        }
                    });
                    let conn = http1::Builder::new()
                        .keep_alive(true)
                        .serve_connection(TokioIo::new(stream), svc);
                    tokio::pin!(conn);
                    tokio::select! {
                        _ = conn.as_mut() => return,
                        _ = drain.changed() => conn.as_mut().graceful_shutdown(),
                    }
                    let _ = conn.await;
                });
                // Reap finished connection tasks so the set does not grow.
                while conns.try_join_next().is_some() {}
            }
        }
    }

    drop(listener);
    let _ = drain_tx.send(true);
    let drained = tokio::time::timeout(DRAIN_TIMEOUT, async {
        while conns.join_next().await.is_some() {}
    })
    .await;
    if drained.is_err() {
        conns.abort_all();
    }
}
