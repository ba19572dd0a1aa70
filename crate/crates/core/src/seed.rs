//! Deterministic seed derivation. Every random stream in a run is keyed by
//! the run seed plus a purpose tag and indices, so rollouts can be replayed
//! or resumed without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, parts))
}

/// Purpose tags for [`derive`].
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const GRAMMAR: u64 = 3;
    pub const PROJECTION: u64 = 4;
    pub const ROLLOUT: u64 = 10;
    pub const PPO_SHUFFLE: u64 = 11;
    pub const EVAL: u64 = 12;
    pub const PRETRAIN: u64 = 13;
    pub const PRETRAIN_EVAL: u64 = 14;
    pub const INIT_SPEAKER: u64 = 20;
    pub const INIT_TOM: u64 = 21;
    pub const INIT_LISTENER: u64 = 22;
    pub const PLAY: u64 = 30;
}
