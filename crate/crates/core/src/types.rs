//! Domain types shared by every part of a node.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// Kind of value a field carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Numeric,
    Text,
}

/// One named data item of a sensor record, e.g. the `x` axis of an accelerometer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub unit: String,
}

impl FieldSpec {
    pub fn numeric(name: impl Into<String>, unit: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Numeric,
            unit: unit.into(),
        }
    }

    pub fn text(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Text,
            unit: String::new(),
        }
    }
}

/// Returns true when `name` matches `[a-z][a-z0-9_]*`.
pub fn is_field_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Checks the invariants of an output structure: non-empty, valid and unique names.
pub fn validate_output(fields: &[FieldSpec]) -> Result<()> {
    if fields.is_empty() {
        return Err(EngineError::invalid_descriptor("output structure is empty"));
    }
    for (i, f) in fields.iter().enumerate() {
        if !is_field_name(&f.name) {
            return Err(EngineError::invalid_descriptor(format!(
                "field name `{}` must match [a-z][a-z0-9_]*",
                f.name
            )));
        }
        if fields[..i].iter().any(|g| g.name == f.name) {
            return Err(EngineError::invalid_descriptor(format!(
                "duplicate field name `{}`",
                f.name
            )));
        }
    }
    Ok(())
}

/// A scalar inside a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Text(_) => None,
        }
    }

    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Num(_) => FieldKind::Numeric,
            Value::Text(_) => FieldKind::Text,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Num(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_owned())
    }
}

/// Milliseconds since the Unix epoch.
pub type TimestampMs = i64;

/// One timestamped sensor record. Values line up positionally with the owning
/// sensor's output structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamElement {
    pub ts: TimestampMs,
    pub values: Vec<Value>,
}

impl StreamElement {
    pub fn new(ts: TimestampMs, values: Vec<Value>) -> Self {
        Self { ts, values }
    }

    pub fn numeric(ts: TimestampMs, values: impl IntoIterator<Item = f64>) -> Self {
        Self {
            ts,
            values: values.into_iter().map(Value::Num).collect(),
        }
    }

    /// Checks arity, per-field kind and finiteness against `output`.
    pub fn conforms_to(&self, output: &[FieldSpec]) -> Result<()> {
        if self.values.len() != output.len() {
            return Err(EngineError::invalid_query(format!(
                "element has {} values, structure has {} fields",
                self.values.len(),
                output.len()
            )));
        }
        for (v, f) in self.values.iter().zip(output) {
            if v.kind() != f.kind {
                return Err(EngineError::invalid_query(format!(
                    "field `{}` expects {:?}",
                    f.name, f.kind
                )));
            }
            if let Value::Num(x) = v {
                if !x.is_finite() {
                    return Err(EngineError::invalid_query(format!(
                        "field `{}` is not finite",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

macro_rules! ident_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl FromStr for $name {
            type Err = EngineError;

            fn from_str(s: &str) -> Result<Self> {
                if s.is_empty() || s.len() > 128 || !s.chars().all(is_ident_char) {
                    return Err(EngineError::invalid_query(format!(
                        concat!("invalid ", stringify!($name), " `{}`"),
                        s
                    )));
                }
                Ok(Self(s.to_owned()))
            }
        }

        impl TryFrom<String> for $name {
            type Error = EngineError;

            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

ident_type!(
    /// Identity of a node within one deployment or harness run.
    NodeId
);
ident_type!(
    /// Name of a virtual sensor, unique within its node.
    SensorName
);
ident_type!(SubscriptionId);
ident_type!(RequestId);
