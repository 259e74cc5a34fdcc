//! Deterministic seed derivation and uniform float draws.
//!
//! Every RNG stream in the crate is a ChaCha8 generator seeded through
//! [`derive_seed`], which hashes a master seed, a domain tag, and integer
//! indices. Distinct tags keep streams independent (training instances never
//! collide with evaluation instances), and the scheme is stable across
//! platforms because it only uses explicit integer arithmetic.

use rand::RngCore;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Final mixing step; bijective on u64, so derived seeds stay well spread.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, domain, indices)` via FNV-1a plus a
/// splitmix64 finalizer.
pub fn derive_seed(master: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut mix = |byte: u8| {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    };
    for b in master.to_le_bytes() {
        mix(b);
    }
    for &b in domain.as_bytes() {
        mix(b);
    }
    for ix in indices {
        for b in ix.to_le_bytes() {
            mix(b);
        }
    }
    splitmix64(h)
}

/// Maps 64 random bits to a float in `[0, 1)` using the top 53 bits.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Draws a uniform float in `[0, 1)` from `rng`.
pub fn next_unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    unit_f64(rng.next_u64())
}

/// Draws a uniform integer in `[lo, hi]` inclusive.
///
/// Uses modulo reduction; the bias is below `(hi - lo + 1) / 2^64`, which is
/// negligible for the size ranges used here.
pub fn next_in_range<R: RngCore>(rng: &mut R, lo: usize, hi: usize) -> usize {
    debug_assert!(lo <= hi);
    let span = (hi - lo + 1) as u64;
    lo + (rng.next_u64() % span) as usize
}
