//! Per-phase seed derivation from a single root seed.

use sha2::{Digest, Sha256};

/// Seed for the phase named `tag`, sub-stream `index`.
pub fn derive(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
