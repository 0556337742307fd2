//! Content hashes embedded in forecasts, checkpoints and score tables.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical (serde field order) JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    short_hash(&serde_json::to_vec(value).expect("config is serializable"))
}

/// Hash of several `f32` payloads, bit-exact.
pub fn fingerprint_f32<'a>(parts: impl IntoIterator<Item = &'a [f32]>) -> String {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        for x in part {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}
