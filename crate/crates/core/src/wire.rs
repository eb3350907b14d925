//! Canonical text encoding shared by the HTTP API, external plugins and the
//! storage journal.
//!
//! A [`StreamElement`] is encoded as `{"ts": <integer ms>, "values": [...]}`.
//! Field names are not repeated per record; they travel with the sensor's
//! published output structure.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{EngineError, Result};
use crate::types::StreamElement;

pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    // Serializing the crate's own payload types cannot fail: no maps with
    // non-string keys, and non-finite floats are rejected before they get here.
    serde_json::to_vec(value).expect("payload serializes")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| EngineError::invalid_query(format!("malformed payload: {e}")))
}

pub fn encode_element(element: &StreamElement) -> Vec<u8> {
    encode(element)
}

pub fn decode_element(bytes: &[u8]) -> Result<StreamElement> {
    decode(bytes)
}
