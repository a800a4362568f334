//! Stable seed derivation.
//!
//! A component seed is `splitmix64(master ^ splitmix64(fnv1a(name) ^ fnv1a(label bits)))`.
//! FNV-1a and SplitMix64 are fixed algorithms, so derived seeds never change across
//! toolchains or platforms. Labels enter through their IEEE-754 bit pattern.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, component: &str, label: Option<f64>) -> u64 {
    let mut h = fnv1a(component.as_bytes());
    if let Some(y) = label {
        h ^= fnv1a(&y.to_bits().to_le_bytes()).rotate_left(17);
    }
    splitmix64(master ^ splitmix64(h))
}

pub fn derive_rng(master: u64, component: &str, label: Option<f64>) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, component, label))
}
