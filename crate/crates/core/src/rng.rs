//! Seeded, stage-labelled random streams.
//!
//! Every stochastic choice draws from `stream(seed, stage)`, so a stage can be
//! re-run in isolation and adding draws to one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    DataMeans = 1,
    DataNoise = 2,
    Init = 3,
    Shuffle = 4,
    EvalSubset = 5,
    Agent = 6,
    RandomFlips = 7,
    RandomSearch = 8,
    FaultInjection = 9,
    Misc = 10,
}

pub type StageRng = ChaCha8Rng;

pub fn stream(seed: u64, stage: Stage) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Independent stream for the `i`-th repetition of a stage.
pub fn substream(seed: u64, stage: Stage, i: u64) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stage as u64);
    rng
}
