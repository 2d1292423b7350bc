//! Named sub-seeds. Every random stream (data, init, shuffle) is derived from
//! one root seed so runs are reproducible from a single number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for the stream called `name`.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn rng(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(root, name))
}

/// Stream for the `index`-th repetition of a named process (e.g. epochs).
pub fn indexed_rng(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(sub_seed(root, name) ^ splitmix64(index)))
}
