//! Counter-derived random streams.
//!
//! Every random draw in the crate comes from a stream keyed by the root seed
//! plus a path of counters (replicate index, purpose, iteration). Streams
//! never share state, so adding replicates or changing the thread count
//! cannot perturb any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for substreams.
pub mod purpose {
    pub const COVARIATES: u64 = 1;
    pub const TREATMENT: u64 = 2;
    pub const OUTCOME: u64 = 3;
    pub const CENSORING: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const REPLICATE: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a root seed and a counter path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(root: u64, path: &[u64]) -> StreamRng {
    let key = derive_seed(root, path);
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(key.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
