use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::client::conn::http1::{self, SendRequest};
use hyper::{Request, StatusCode};
use hyper_util::rt::TokioIo;
use serde::de::DeserializeOwned;
use tokio::net::TcpStream;
use tokio::task::JoinHandle;

use super::{DeviceProfile, CONNECT_TIMEOUT};
use crate::error::{EngineError, ErrorBody, ErrorKind, Result};
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
    Delete,
}

impl Method {
    fn as_hyper(self) -> hyper::Method {
        match self {
            Method::Get => hyper::Method::GET,
            Method::Post => hyper::Method::POST,
            Method::Delete => hyper::Method::DELETE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: Bytes,
}

impl HttpReply {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// Converts a non-2xx reply into the error it carries.
    pub fn error(&self) -> EngineError {
        if let Ok(b) = wire::decode::<ErrorBody>(&self.body) {
            return b.error;
        }
        let kind = ErrorKind::from_http_status(self.status).unwrap_or(ErrorKind::PeerUnreachable);
        EngineError::new(kind, format!("peer answered HTTP {}", self.status))
    }

    /// Decodes a 2xx body or surfaces the reply's error.
    pub fn json<T: DeserializeOwned>(&self) -> Result<T> {
        if !self.is_success() {
            return Err(self.error());
        }
        wire::decode(&self.body)
    }

    /// Ok for any 2xx reply.
    pub fn ok(&self) -> Result<()> {
        if self.is_success() {
            Ok(())
        } else {
            Err(self.error())
        }
    }
}

/// One client-side HTTP/1.1 connection to a peer, reused across requests.
pub struct HttpConnection {
    addr: String,
    sender: SendRequest<Full<Bytes>>,
    driver: JoinHandle<()>,
    profile: DeviceProfile,
}

impl HttpConnection {
    /// Opens a new TCP connection to `addr` (`host:port`).
    pub async fn open(addr: &str, profile: DeviceProfile) -> Result<Self> {
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| EngineError::peer_unreachable(format!("connect to {addr} timed out")))?
            .map_err(|e| EngineError::peer_unreachable(format!("connect to {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        profile.charge_connection();
        let (sender, conn) = http1::handshake(TokioIo::new(stream))
            .await
            .map_err(|e| EngineError::peer_unreachable(format!("handshake with {addr}: {e}")))?;
        let driver = tokio::spawn(async move {
            let _ = conn.await;
        });
        Ok(Self {
            addr: addr.to_owned(),
            sender,
            driver,
            profile,
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn is_closed(&self) -> bool {
        self.sender.is_closed() || self.driver.is_finished()
    }

    pub async fn send(
        &mut self,
        method: Method,
        path: &str,
        body: Option<Vec<u8>>,
        timeout: Duration,
    ) -> Result<HttpReply> {
        let exchange = async {
            self.sender
                .ready()
                .await
                .map_err(|e| EngineError::peer_unreachable(format!("{}: {e}", self.addr)))?;
            let mut req = Request::builder()
                .method(method.as_hyper())
                .uri(path)
                .header(hyper::header::HOST, self.addr.as_str());
            if body.is_some() {
                req = req.header(hyper::header::CONTENT_TYPE, "application/json");
            }
            let req = req
                .body(Full::new(Bytes::from(body.unwrap_or_default())))
                .map_err(|e| EngineError::invalid_query(e.to_string()))?;
            let resp = self
                .sender
                .send_request(req)
                .await
                .map_err(|e| EngineError::peer_unreachable(format!("{}: {e}", self.addr)))?;
            let status = resp.status();
            let body = resp
                .into_body()
                .collect()
                .await
                .map_err(|e| EngineError::peer_unreachable(format!("{}: {e}", self.addr)))?
                .to_bytes();
            Ok::<_, EngineError>((status, body))
        };
        let (status, body) = tokio::time::timeout(timeout, exchange)
            .await
            .map_err(|_| EngineError::peer_unreachable(format!("{} timed out", self.addr)))??;
        self.profile.charge_request();
        Ok(HttpReply {
            status: status_code(status),
            body,
        })
    }
}

impl Drop for HttpConnection {
    fn drop(&mut self) {
        self.driver.abort();
    }
}

fn status_code(s: StatusCode) -> u16 {
    s.as_u16()
}

/// Opens a fresh connection, performs one exchange and closes it.
pub async fn one_shot(
    addr: &str,
    method: Method,
    path: &str,
    body: Option<Vec<u8>>,
    profile: DeviceProfile,
    timeout: Duration,
) -> Result<HttpReply> {
    let mut conn = HttpConnection::open(addr, profile).await?;
    conn.send(method, path, body, timeout).await
}
