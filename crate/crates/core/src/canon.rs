//! Canonical text form.
//!
//! Objects are written as JSON with lexicographically sorted object keys,
//! no insignificant whitespace and integer-only numbers. Every stored object
//! carries an `"object"` key naming its kind, so a bare file is
//! self-describing. The exact grammar is in `docs/format.md`.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Key holding the object kind tag in stored objects.
pub const OBJECT_KEY: &str = "object";

#[derive(Debug, thiserror::Error)]
pub enum CanonError {
    #[error("malformed text: {0}")]
    Json(#[from] serde_json::Error),
    #[error("floating-point number {0} is not allowed; use integer micro-units")]
    Float(String),
    #[error("bytes are not in canonical form")]
    NotCanonical,
    #[error("expected a top-level object")]
    NotAnObject,
    #[error("expected object kind {expected:?}, found {found:?}")]
    WrongObject {
        expected: String,
        found: Option<String>,
    },
    #[error("top-level key {0:?} is reserved")]
    ReservedKey(String),
}

/// Writes `value` in canonical form.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<Vec<u8>, CanonError> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out)?;
    Ok(out.into_bytes())
}

/// Writes `value` in canonical form with an object-kind tag added at top level.
pub fn to_canonical_tagged<T: Serialize>(tag: &str, value: &T) -> Result<Vec<u8>, CanonError> {
    let mut v = serde_json::to_value(value)?;
    let map = v.as_object_mut().ok_or(CanonError::NotAnObject)?;
    if map.contains_key(OBJECT_KEY) {
        return Err(CanonError::ReservedKey(OBJECT_KEY.to_string()));
    }
    map.insert(OBJECT_KEY.to_string(), Value::String(tag.to_string()));
    let mut out = String::new();
    write_value(&v, &mut out)?;
    Ok(out.into_bytes())
}

/// Parses any well-formed text (whitespace and key order are free). Floats
/// are rejected.
pub fn from_text<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CanonError> {
    let v: Value = serde_json::from_slice(bytes)?;
    reject_floats(&v)?;
    Ok(serde_json::from_value(v)?)
}

/// Parses a tagged object, checking that its kind tag equals `tag`. A missing
/// tag is accepted for hand-written input files.
pub fn from_text_tagged<T: DeserializeOwned>(tag: &str, bytes: &[u8]) -> Result<T, CanonError> {
    let mut v: Value = serde_json::from_slice(bytes)?;
    reject_floats(&v)?;
    let map = v.as_object_mut().ok_or(CanonError::NotAnObject)?;
    match map.remove(OBJECT_KEY) {
        None => {}
        Some(Value::String(s)) if s == tag => {}
        Some(other) => {
            return Err(CanonError::WrongObject {
                expected: tag.to_string(),
                found: Some(other.as_str().unwrap_or("<non-string>").to_string()),
            })
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// Reads the kind tag of a stored object without decoding the rest.
pub fn object_tag(bytes: &[u8]) -> Result<String, CanonError> {
    let v: Value = serde_json::from_slice(bytes)?;
    match v.get(OBJECT_KEY) {
        Some(Value::String(s)) => Ok(s.clone()),
        other => Err(CanonError::WrongObject {
            expected: "<any>".to_string(),
            found: other.map(|o| o.to_string()),
        }),
    }
}

/// Parses a tagged object and requires that `bytes` are exactly its canonical
/// encoding.
pub fn from_canonical_tagged<T: DeserializeOwned + Serialize>(
    tag: &str,
    bytes: &[u8],
) -> Result<T, CanonError> {
    let v: Value = serde_json::from_slice(bytes)?;
    reject_floats(&v)?;
    match v.get(OBJECT_KEY) {
        Some(Value::String(s)) if s == tag => {}
        other => {
            return Err(CanonError::WrongObject {
                expected: tag.to_string(),
                found: other.map(|o| o.as_str().unwrap_or("<non-string>").to_string()),
            })
        }
    }
    let decoded: T = from_text_tagged(tag, bytes)?;
    if to_canonical_tagged(tag, &decoded)? != bytes {
        return Err(CanonError::NotCanonical);
    }
    Ok(decoded)
}

fn reject_floats(v: &Value) -> Result<(), CanonError> {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => Err(CanonError::Float(n.to_string())),
        Value::Array(items) => items.iter().try_for_each(reject_floats),
        Value::Object(map) => map.values().try_for_each(reject_floats),
        _ => Ok(()),
    }
}

fn write_value(v: &Value, out: &mut String) -> Result<(), CanonError> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                return Err(CanonError::Float(n.to_string()));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key)?);
                out.push(':');
                write_value(&map[key], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}
