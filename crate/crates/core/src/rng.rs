//! Named, counter-addressable random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GrafitRng = ChaCha8Rng;

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for sub-stream `name` of `seed`, positioned at `counter`.
///
/// Distinct `(name, counter)` pairs give independent streams, so parallel
/// workers can draw reproducibly without sharing state.
pub fn stream(seed: u64, name: &str, counter: u64) -> GrafitRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    rng.set_stream(counter);
    rng
}
