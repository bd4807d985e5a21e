//! Seeded randomness.
//!
//! Sequential streams are xoshiro256** seeded through splitmix64
//! (`rand_xoshiro`). Stateless per-position draws such as dropout masks
//! hash a tuple of counters with the splitmix64 finalizer.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

/// Recorded in artifacts whose content depends on the generator.
pub const ALGORITHM: &str = "xoshiro256** seeded via splitmix64; counter draws via splitmix64 finalizer";

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a counter tuple to 64 uniform bits.
#[inline]
pub fn counter_hash(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C909, |h, &w| splitmix64(h ^ w))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn counter_uniform(words: &[u64]) -> f64 {
    (counter_hash(words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent stream for a named purpose under one master seed.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    Rng::seed_from_u64(counter_hash(&[seed, purpose as u64, index]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Split = 4,
    Sample = 5,
    SyntheticMap = 6,
    SyntheticSource = 7,
    SyntheticNoise = 8,
}
