//! Stable content hashes for configs, artifacts and id sets.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `value`.
///
/// `serde_json` preserves struct field order and `BTreeMap` key order, so
/// the encoding is stable for the types used here.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    sha256_hex(&bytes)
}

/// Order-independent hash of a set of ids.
pub fn id_set_hash<'a, I: IntoIterator<Item = &'a str>>(ids: I) -> String {
    let mut v: Vec<&str> = ids.into_iter().collect();
    v.sort_unstable();
    let mut h = Sha256::new();
    for id in v {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Derives an independent 64-bit seed from a base seed and a path of
/// stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_set_hash_ignores_order_but_not_content() {
        assert_eq!(id_set_hash(["a", "b"]), id_set_hash(["b", "a"]));
        assert_ne!(id_set_hash(["ab"]), id_set_hash(["a", "b"]));
    }
}
