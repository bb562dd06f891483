//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by the 64-bit run seed (expanded
//! with `seed_from_u64`). Each consumer gets its own ChaCha stream id, so the
//! frame generator, the noise source and weight initialisation never share
//! state and adding draws to one of them cannot perturb the others.
//!
//! Stream id layout: `role << 32 | index`, where `index` separates trials or
//! sweep cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Frame = 1,
    Noise = 2,
    Init = 3,
    Baseline = 4,
}

pub fn substream(seed: u64, role: Role, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((role as u64) << 32) | index as u64);
    rng
}
