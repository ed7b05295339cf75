//! SplitMix64-based mixing used by the synthetic backend and the compute log.
//!
//! The constants are the published SplitMix64 finalizer constants
//! (Steele, Lea & Flood, 2014), so any implementation can reproduce the
//! synthetic model's predictions bit-for-bit:
//!
//! ```text
//! mix64(x):
//!     z = x + 0x9E3779B97F4A7C15          (wrapping)
//!     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!     return z ^ (z >> 31)
//! ```

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds one token into a running hash.
#[inline]
pub fn fold(h: u64, token: u32) -> u64 {
    mix64(h ^ u64::from(token))
}

/// Maps a hash to a uniform real in `[0, 1)` using its top 53 bits.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
