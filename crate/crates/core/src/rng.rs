//! Seed splitting.
//!
//! Every random stream in the crate is derived from a single root seed and a
//! stream label: `child = splitmix64(root ^ splitmix64(tag) ^ index * GOLDEN)`.
//! Paths, bootstrap trials and samplers each take their own child stream, so
//! the order in which work is scheduled cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Path = 1,
    Interior = 2,
    Terminal = 3,
    Init = 4,
    Bootstrap = 5,
    Synthetic = 6,
}

pub fn child_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream as u64) ^ index.wrapping_mul(GOLDEN))
}

pub fn child_rng(root: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(child_seed(root, stream, index))
}
