//! Seeded random streams. Every consumer derives an independent ChaCha stream
//! from the global seed plus a stream id, so results never depend on the order
//! in which components draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream keyed by a name (FNV-1a of the bytes).
pub fn named(seed: u64, name: &str) -> ChaCha8Rng {
    stream(seed, fnv1a(name.as_bytes()))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
