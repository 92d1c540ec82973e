//! Keyed random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(master seed, purpose, step, sample)`. Streams are derived by hashing the
//! key, so changing the number of samples never reshuffles the draws of
//! earlier samples and parallel evaluation order cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    TrainData,
    TestData,
    Init,
    /// Haar ancillas held fixed while one step is being optimized.
    TrainAncilla,
    /// Fresh ancillas used when pushing training inputs through frozen steps.
    PropagateAncilla,
    PropagateMeasure,
    GenerateAncilla,
    GenerateMeasure,
    Loss,
    PSwap,
    /// Independent data draws for the sampling baseline.
    Baseline,
    Other(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::TrainData => 1,
            Purpose::TestData => 2,
            Purpose::Init => 3,
            Purpose::TrainAncilla => 4,
            Purpose::PropagateAncilla => 5,
            Purpose::PropagateMeasure => 6,
            Purpose::GenerateAncilla => 7,
            Purpose::GenerateMeasure => 8,
            Purpose::Loss => 9,
            Purpose::PSwap => 10,
            Purpose::Baseline => 11,
            Purpose::Other(x) => 0x1000_0000_0000_0000 ^ x,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of a family of streams; `sample(i)` yields the stream for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self { seed, purpose, step: 0 }
    }

    pub fn with_step(self, step: usize) -> Self {
        Self { step: step as u64, ..self }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        Self { purpose, ..self }
    }

    /// Independent generator for sample `index` under this key.
    pub fn sample(&self, index: usize) -> ChaCha8Rng {
        let words = [self.seed, self.purpose.tag(), self.step, index as u64];
        let mut state = 0x243F_6A88_85A3_08D3u64;
        let mut bytes = [0u8; 32];
        for (k, w) in words.iter().enumerate() {
            state = splitmix64(state ^ splitmix64(*w ^ (k as u64).wrapping_mul(0xA076_1D64_78BD_642F)));
            bytes[8 * k..8 * k + 8].copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}
