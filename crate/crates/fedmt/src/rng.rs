//! Deterministic random streams.
//!
//! Every source of randomness in the crate flows from a single root seed
//! through named sub-streams, so reruns are bitwise identical and independent
//! of scheduling order. Stream seeds are derived by hashing, which keeps
//! streams statistically independent of each other and of neighbouring
//! indices.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A generator for the sub-stream `(name, index)` of `root`.
///
/// The same triple always yields the same generator on every platform.
pub fn stream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0x1f]);
    h.update(name.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// A derived root seed for a nested scope (for example one run of a sweep).
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0x2f]);
    h.update(name.as_bytes());
    h.update([0x2f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}
