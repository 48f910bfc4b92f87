//! Derivation of independent random streams from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of stream labels into a child seed.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(root: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}

/// Stable 64-bit FNV-1a hash, used where a seed must depend on a string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

// Stream labels.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCHES: u64 = 2;
pub const STREAM_PICK: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_DROPOUT: u64 = 5;
pub const STREAM_EMBEDDING: u64 = 6;
