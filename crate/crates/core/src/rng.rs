//! Named deterministic random streams.
//!
//! Every random choice draws from a stream keyed by the run seed plus a
//! path of tags (period, server, purpose, ...), so no choice depends on the
//! order in which others were made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buckets::mix64;

pub const HASH_SEEDS: u64 = 1;
pub const DEDUPE_SEED: u64 = 2;
pub const PARTLY_PICK: u64 = 3;
pub const METADATA: u64 = 4;
pub const PROBE_START: u64 = 5;
pub const DECODE_PICK: u64 = 6;
pub const ADVERSARY: u64 = 7;
pub const PRELOAD: u64 = 8;

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = mix64(seed);
    for &t in tags {
        h = mix64(h ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(h)
}
