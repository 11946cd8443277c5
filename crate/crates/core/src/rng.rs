//! Deterministic pseudo-random number generation.
//!
//! Split assignments and subset selections must reproduce bit-for-bit
//! across platforms and reimplementations, so the generator is pinned to a
//! published algorithm rather than whatever a library ships this year.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood, 2014). Its complete
//! update is:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15                      (mod 2^64)
//! z = state
//! z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9       (mod 2^64)
//! z = (z XOR (z >> 27)) * 0x94D049BB133111EB       (mod 2^64)
//! output = z XOR (z >> 31)
//! ```
//!
//! Bounded draws use rejection sampling (reject the top `2^64 mod n`
//! values) so every residue is exactly equally likely, and shuffles are
//! Fisher-Yates from the last index down.

/// SplitMix64 generator. See the module docs for the update equations.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Next 64 uniformly distributed bits.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw from `0..n` without modulo bias.
    ///
    /// Draws are rejected while they fall in the top `2^64 mod n` values,
    /// then reduced modulo `n`.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "bounded draw requires n > 0");
        // 2^64 mod n, computed in u64 arithmetic.
        let excess = (u64::MAX % n + 1) % n;
        let limit = u64::MAX - excess;
        loop {
            let x = self.next_u64();
            if x <= limit {
                return x % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// FNV-1a 64-bit hash, used to derive per-stratum seed streams from
/// string keys:
///
/// ```text
/// h = 0xCBF29CE484222325
/// for each byte b: h = (h XOR b) * 0x00000100000001B3   (mod 2^64)
/// ```
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_reference_sequence() {
        // First three outputs for seed 1234567, cross-checked against the
        // published reference implementation.
        let mut rng = SplitMix64::new(1234567);
        assert_eq!(rng.next_u64(), 6457827717110365317);
        assert_eq!(rng.next_u64(), 3203168211198807973);
        assert_eq!(rng.next_u64(), 9817491932198370423);
    }

    #[test]
    fn fnv1a64_reference_values() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xCBF2_9CE4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xAF63_DC4C_8601_EC8C);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171F73967E8);
    }

    #[test]
    fn bounded_draws_stay_in_range() {
        let mut rng = SplitMix64::new(42);
        for n in [1u64, 2, 3, 7, 100, 1 << 40] {
            for _ in 0..100 {
                assert!(rng.next_below(n) < n);
            }
        }
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        SplitMix64::new(9).shuffle(&mut a);
        SplitMix64::new(9).shuffle(&mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
