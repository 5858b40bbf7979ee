//! Canonical JSON rendering used for digests.
//!
//! Object keys are emitted in sorted order, there is no insignificant
//! whitespace, and floating point numbers use Rust's shortest round-trip
//! exponent form (`3.25e1`). Two structurally equal values always render
//! to the same bytes on every platform.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Render any serializable value canonically.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&value, &mut out);
    Ok(out)
}

/// Render an already-built JSON value canonically.
pub fn canonical_value(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                out.push_str(&format_float(f));
            }
        }
        Value::String(s) => {
            // serde_json string escaping is deterministic
            out.push_str(&serde_json::to_string(s).expect("string serialization"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
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
                out.push_str(&serde_json::to_string(key).expect("key serialization"));
                out.push(':');
                write_value(&map[key], out);
            }
            out.push('}');
        }
    }
}

/// Shortest round-trip exponent formatting, e.g. `30.0 -> 3e1`.
pub fn format_float(f: f64) -> String {
    format!("{f:e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_compact() {
        let v = json!({"b": 1, "a": [true, null, "x"], "c": {"z": 0.5, "y": -2}});
        assert_eq!(
            canonical_value(&v),
            r#"{"a":[true,null,"x"],"b":1,"c":{"y":-2,"z":5e-1}}"#
        );
    }

    #[test]
    fn floats_round_trip() {
        for f in [0.1, 1.0 / 3.0, 1e300, -2.5e-308, 30.0, 123456.789] {
            let s = format_float(f);
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), f.to_bits(), "{s}");
        }
    }
}
