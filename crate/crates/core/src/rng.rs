//! Seeded random streams.
//!
//! Every run owns a single 64-bit seed. Each stage draws from its own ChaCha8
//! stream keyed by that seed, so adding draws in one stage never shifts the
//! numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Init = 1,
    Augment = 2,
    Batch = 3,
    Cluster = 4,
    Synth = 5,
    Folds = 6,
    GradCheck = 7,
    Illuminants = 8,
}

pub fn stage_rng(seed: u64, stage: Stage) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// A stream for the `index`-th item of a stage (e.g. one synthetic scene).
pub fn item_rng(seed: u64, stage: Stage, index: u64) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stage as u64);
    rng
}
