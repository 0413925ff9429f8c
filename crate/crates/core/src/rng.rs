//! Named, independent random streams derived from one master seed.
//!
//! Every run owns a master seed. Each consumer (weight init, data shuffling,
//! dropout, fault sampling, selection) draws from its own ChaCha8 stream:
//! the 64-bit seed is `mix(master, salts...)` and the ChaCha stream id is the
//! [`Stream`] discriminant. Changing how much one consumer draws never shifts
//! the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    DataShuffle = 2,
    Dropout = 3,
    Faults = 4,
    Selection = 5,
    Synthetic = 6,
    Certificate = 7,
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds salts into the master seed.
pub fn mix(master: u64, salts: &[u64]) -> u64 {
    salts
        .iter()
        .fold(splitmix64(master), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn stream(master: u64, stream: Stream) -> Rng {
    salted(master, stream, &[])
}

pub fn salted(master: u64, stream: Stream, salts: &[u64]) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(master, salts));
    rng.set_stream(stream as u64);
    rng
}
