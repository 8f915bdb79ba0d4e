//! Seed derivation.
//!
//! Every random decision in a run draws from a ChaCha stream keyed by
//! `(root seed, node, round, domain)`, so that two runs which present the
//! same node with the same tokens in the same round make identical choices
//! regardless of what happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep the substreams for different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Graph = 0x6772_6170_6800_0000,
    Init = 0x696e_6974_0000_0000,
    Route = 0x726f_7574_6500_0000,
    Sweep = 0x7377_6565_7000_0000,
    Scenario = 0x7363_656e_0000_0000,
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a sequence of words into one 64-bit seed.
pub fn derive_seed(root: u64, domain: Domain, parts: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ domain as u64);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(root: u64, domain: Domain, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, domain, parts))
}
