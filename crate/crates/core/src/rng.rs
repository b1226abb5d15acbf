//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`seeded_rng`]: ChaCha8 with
//! the 64-bit seed expanded by `rand_core`'s `seed_from_u64` (PCG32 stream),
//! both of which are specified algorithms with fixed output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}
