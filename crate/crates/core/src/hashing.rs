//! Canonical hashing of serializable configs and files.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` as JSON with sorted object keys.
///
/// `serde_json::Value` keeps object keys in a `BTreeMap` unless the
/// `preserve_order` feature is on, so a round-trip through `Value` sorts them.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config types serialize infallibly");
    serde_json::to_string(&v).expect("json values serialize infallibly")
}

/// Hex SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn key_order_does_not_change_hash() {
        let mut a = HashMap::new();
        a.insert("zeta", 1);
        a.insert("alpha", 2);
        let mut b = HashMap::new();
        b.insert("alpha", 2);
        b.insert("zeta", 1);
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(canonical_json(&a), r#"{"alpha":2,"zeta":1}"#);
    }
}
