//! Node runtime for distributed opportunistic sensing.
//!
//! A node samples plugin-backed sensors through virtual sensors, runs each
//! record through a processor chain, keeps a bounded local history and
//! shares data with peers over HTTP, either by letting them pull over a held
//! session or by pushing each delivery on a fresh connection.

pub mod api;
pub mod clock;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod net;
pub mod node;
pub mod plugin;
pub mod processor;
pub mod registry;
pub mod sharing;
pub mod ring;
pub mod storage;
pub mod types;
pub mod wire;

pub use error::{EngineError, ErrorKind, Result};
pub use types::{FieldKind, FieldSpec, NodeId, RequestId, SensorName, StreamElement, SubscriptionId, TimestampMs, Value};
