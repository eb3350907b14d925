use std::fmt;

use serde::{Deserialize, Serialize};

/// Failure category. Every fallible operation reports exactly one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    NotFound,
    Conflict,
    InvalidDescriptor,
    InvalidQuery,
    PluginFailure,
    PeerUnreachable,
    BufferOverflow,
    Shutdown,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 8] = [
        ErrorKind::NotFound,
        ErrorKind::Conflict,
        ErrorKind::InvalidDescriptor,
        ErrorKind::InvalidQuery,
        ErrorKind::PluginFailure,
        ErrorKind::PeerUnreachable,
        ErrorKind::BufferOverflow,
        ErrorKind::Shutdown,
    ];
}

impl ErrorKind {
    /// HTTP status an endpoint answers with for this kind.
    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::InvalidDescriptor | ErrorKind::InvalidQuery => 400,
            ErrorKind::PluginFailure => 500,
            ErrorKind::PeerUnreachable => 502,
            ErrorKind::BufferOverflow => 507,
            ErrorKind::Shutdown => 503,
        }
    }

    /// Best-effort inverse of [`ErrorKind::http_status`] for replies without an
    /// error body. 400 is ambiguous and reads back as `InvalidQuery`.
    pub fn from_http_status(status: u16) -> Option<ErrorKind> {
        Some(match status {
            404 => ErrorKind::NotFound,
            409 => ErrorKind::Conflict,
            400 => ErrorKind::InvalidQuery,
            500 => ErrorKind::PluginFailure,
            502 => ErrorKind::PeerUnreachable,
            507 => ErrorKind::BufferOverflow,
            503 => ErrorKind::Shutdown,
            _ => return None,
        })
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{kind}: {detail}")]
pub struct EngineError {
    pub kind: ErrorKind,
    pub detail: String,
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

impl EngineError {
    pub fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, detail)
    }

    pub fn conflict(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Conflict, detail)
    }

    pub fn invalid_descriptor(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::InvalidDescriptor, detail)
    }

    pub fn invalid_query(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::InvalidQuery, detail)
    }

    pub fn plugin_failure(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::PluginFailure, detail)
    }

    pub fn peer_unreachable(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::PeerUnreachable, detail)
    }

    pub fn shutdown(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Shutdown, detail)
    }

    pub fn is(&self, kind: ErrorKind) -> bool {
        self.kind == kind
    }
}

/// JSON body of every non-2xx API reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: EngineError,
}
