//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`).
//! A substream for `(seed, domain, index)` is
//!
//! ```text
//! rng = ChaCha8Rng::seed_from_u64(seed ^ domain)   // rand_core PCG32 key expansion
//! rng.set_stream(index)
//! ```
//!
//! where `domain` is one of the fixed constants below. Uniform integers in
//! `[0, n)` use Lemire's multiply-shift with rejection on `next_u64`, and
//! uniform reals use the top 53 bits of `next_u64`. None of this depends on
//! the `rand` distribution code, so streams are stable across `rand`
//! releases and easy to reproduce in other languages.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Tie-break shuffle in stratified selection.
pub const DOMAIN_STRATIFY: u64 = 0x5354_5241_5449_4659; // "STRATIFY"
/// Bootstrap replicates for a single accuracy.
pub const DOMAIN_BOOTSTRAP: u64 = 0x424f_4f54_5354_5250; // "BOOTSTRP"
/// Bootstrap replicates for a baseline/condition difference.
pub const DOMAIN_BOOTSTRAP_DELTA: u64 = 0x424f_4f54_4445_4c54; // "BOOTDELT"
/// Permutation test rounds.
pub const DOMAIN_PERMUTATION: u64 = 0x5045_524d_5554_4520; // "PERMUTE "
/// Synthetic dataset generation, one stream per image.
pub const DOMAIN_SYNTH: u64 = 0x5359_4e54_4845_5349; // "SYNTHESI"
/// Mock detector, one stream per image.
pub const DOMAIN_DETECT: u64 = 0x4d4f_434b_4445_5445; // "MOCKDETE"

pub fn substream(seed: u64, domain: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    Stream(rng)
}

pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.below(len as u64) as usize
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
