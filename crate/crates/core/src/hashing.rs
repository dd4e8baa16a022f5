use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 16 hex chars of the SHA-256, used for ids and digests.
pub fn short_hash(bytes: &[u8]) -> String {
    let mut h = sha256_hex(bytes);
    h.truncate(16);
    h
}

/// Derives a child seed from a base seed and a list of labels. Stable across
/// platforms and releases.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for l in labels {
        hasher.update((l.len() as u64).to_le_bytes());
        hasher.update(l.as_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Uniform value in `[0, 1)` derived from a string, for stable sampling
/// decisions such as "review this trace?".
pub fn unit_hash(s: &str) -> f64 {
    (derive_seed(0, &[s]) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_labels() {
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
        assert_eq!(derive_seed(9, &["x"]), derive_seed(9, &["x"]));
    }

    #[test]
    fn unit_hash_in_range() {
        for s in ["a", "b", "trace-1", ""] {
            let u = unit_hash(s);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
