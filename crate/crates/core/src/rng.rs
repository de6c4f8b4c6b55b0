//! Seeded randomness.
//!
//! Every stochastic component uses ChaCha8 seeded from a `u64`. The stream
//! is fixed across platforms and crate versions of `rand_chacha` 0.3, which
//! is what makes runs reproducible bit for bit.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng64;

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Independent generator for sub-task `index` of a run seeded with `seed`.
pub fn derived(seed: u64, index: u64) -> Rng64 {
    let mut rng = Rng64::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
