//! Seed derivation for reproducible parallel work.
//!
//! Every parallel unit (a dataset centroid, an optimizer restart, a trainer
//! trial) owns a ChaCha stream derived from the master seed and its index, so
//! results do not depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint even when their
/// indices collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Instance = 1,
    Centroid = 2,
    Restart = 3,
    Evaluation = 4,
    Trial = 5,
    TheoryTrial = 6,
    Holdout = 7,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold `(master, kind, index)` into a fresh 64-bit seed.
pub fn sub_seed(master: u64, kind: StreamKind, index: u64) -> u64 {
    let mut state = master;
    let a = splitmix64(&mut state);
    let mut state = a ^ (kind as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
    let b = splitmix64(&mut state);
    let mut state = b ^ index;
    splitmix64(&mut state)
}

/// A ChaCha generator for the given stream.
pub fn derive_rng(master: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, kind, index))
}
