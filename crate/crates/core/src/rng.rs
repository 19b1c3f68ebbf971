//! Deterministic RNG streams.
//!
//! Every random draw in training and evaluation comes from a ChaCha stream
//! keyed by `(seed, purpose, a, b)`, so results do not depend on call order
//! across components and can be reproduced piecewise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    TrainNoise = 3,
    EvalNoise = 4,
    Corruption = 5,
    Data = 6,
}

/// splitmix64 finaliser
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let key = mix(mix(mix(seed ^ mix(purpose as u64)) ^ a) ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Purpose::TrainNoise, 3, 1).random();
        let b: u64 = stream(7, Purpose::TrainNoise, 3, 1).random();
        let c: u64 = stream(7, Purpose::TrainNoise, 3, 2).random();
        let d: u64 = stream(7, Purpose::Shuffle, 3, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
