//! Canonical JSON: UTF-8, object keys sorted, no insignificant whitespace.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

fn sort_value(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, sort_value(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_value).collect()),
        other => other,
    }
}

pub fn to_canonical_vec<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("metadata types always serialize");
    serde_json::to_vec(&sort_value(v)).expect("serializing a Value cannot fail")
}

pub fn from_slice<T: DeserializeOwned>(key: &str, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::metadata(key, e))
}
