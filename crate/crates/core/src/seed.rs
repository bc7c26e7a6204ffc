//! Counter-based seed splitting. One root seed fans out into independent
//! streams per purpose and index, so reordering or parallelizing work can
//! never change which stream a consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes `(base, purpose, index)` into a stream seed. splitmix-style
/// finalizer over a purpose hash; collisions across purposes are as likely
/// as 64-bit hash collisions.
pub fn derive(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    mix(base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
