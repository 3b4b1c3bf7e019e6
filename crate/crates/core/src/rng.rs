//! Deterministic RNG derivation.
//!
//! Every stochastic step (weight init, case sampling, velocity noise,
//! phantom jitter) draws from a ChaCha8 stream whose seed is derived from
//! the user seed plus a purpose tag and counters. Derivation is splittable:
//! iteration `n` of a training run can be reproduced without replaying
//! iterations `0..n`, which is what makes checkpoint resume bit-exact.
//! Reproducibility is promised within a build, not across builds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates seed/tag/counter tuples.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags keep unrelated consumers of the same user seed independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WeightInit,
    Phantom,
    GroundTruthFlow,
    CaseSampling,
    VelocityNoise,
    GradCheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::WeightInit => 1,
            Stream::Phantom => 2,
            Stream::GroundTruthFlow => 3,
            Stream::CaseSampling => 4,
            Stream::VelocityNoise => 5,
            Stream::GradCheck => 6,
        }
    }
}

/// RNG for `(seed, stream)`; use when there is no per-step counter.
pub fn derive(seed: u64, stream: Stream) -> ChaCha8Rng {
    derive2(seed, stream, 0, 0)
}

/// RNG for `(seed, stream, counter)`, e.g. one phantom per case index.
pub fn derive1(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    derive2(seed, stream, counter, 0)
}

/// RNG for `(seed, stream, counter, sub)`, e.g. (iteration, batch member).
pub fn derive2(seed: u64, stream: Stream, counter: u64, sub: u64) -> ChaCha8Rng {
    let a = mix(seed ^ mix(stream.tag()));
    let b = mix(a ^ mix(counter.wrapping_add(0x51ed_270b)));
    let c = mix(b ^ mix(sub.wrapping_add(0x63a9_f0ea)));
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&mix(c).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
