//! Seeded random streams.
//!
//! Every stochastic stage draws from a ChaCha8 generator keyed by a 64-bit seed and selected by
//! a 64-bit stream id. Stream ids pack a phase tag into the top 16 bits and a replicate index
//! into the low 48 bits, so the offline, design and online phases of one replicate never share
//! a sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Scalar;

pub type LabRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Phase {
    Generator = 1,
    Offline = 2,
    Design = 3,
    Online = 4,
    Reward = 5,
    Diagnostics = 6,
    Sweep = 7,
}

const REPLICATE_BITS: u32 = 48;

impl RngSeed {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn derive(seed: u64, phase: Phase, replicate: u64) -> Self {
        let replicate = replicate & ((1u64 << REPLICATE_BITS) - 1);
        Self { seed, stream: ((phase as u64) << REPLICATE_BITS) | replicate }
    }

    pub fn rng(&self) -> LabRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Inverse-CDF draw from a probability vector.
///
/// Rounding slack at the top of the CDF resolves to the last index with positive mass.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Split-mix style hash used to derive per-cell seeds from a master seed.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
