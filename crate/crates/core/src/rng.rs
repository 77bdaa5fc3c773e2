//! Deterministic random streams.
//!
//! Every random draw in the crate comes from SplitMix64 (Steele, Lea & Flood,
//! 2014): the state advances by the golden-ratio increment `0x9E3779B97F4A7C15`
//! and each output is the `mix64` finalizer of the new state, so output `i` of a
//! stream seeded with `s` is `mix64(s + (i + 1) * gamma)`. Independent streams
//! are split off a master seed by hashing a label into the seed with
//! [`derive_seed`]; string labels are hashed with 64-bit FNV-1a.
//!
//! Conversions:
//! - `next_f64` returns `(x >> 11) * 2^-53`, uniform on `[0, 1)`.
//! - `below(n)` rejects `x < (2^64 - n) mod n` and returns `x mod n`.
//!
//! Test vector: seed `1234567` yields `6457827717110365317`,
//! `3203168211198807973`, `9817491932198370423`, `4593380528125082431`,
//! `16408922859458223821`.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a hash, used to turn stream labels into integers.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of the child stream `label` of `seed`.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label ^ 0x6A09_E667_F3BC_C909))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Child stream identified by an integer label.
    pub fn stream(seed: u64, label: u64) -> Self {
        Self::new(derive_seed(seed, label))
    }

    /// Child stream identified by a string label.
    pub fn named(seed: u64, label: &str) -> Self {
        Self::stream(seed, fnv1a(label.as_bytes()))
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// Uniform point on the unit sphere (z uniform in [-1, 1], azimuth uniform).
    pub fn unit_vector(&mut self) -> [f64; 3] {
        let z = self.uniform(-1.0, 1.0);
        let phi = self.uniform(0.0, std::f64::consts::TAU);
        let rho = (1.0 - z * z).max(0.0).sqrt();
        [rho * phi.cos(), rho * phi.sin(), z]
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, returned in ascending order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_vector() {
        let mut r = SplitMix64::new(1234567);
        let got: Vec<u64> = (0..5).map(|_| r.next_u64()).collect();
        assert_eq!(
            got,
            [
                6457827717110365317,
                3203168211198807973,
                9817491932198370423,
                4593380528125082431,
                16408922859458223821
            ]
        );
    }

    #[test]
    fn counter_form() {
        let seed = 99u64;
        let mut r = SplitMix64::new(seed);
        for i in 1..=10u64 {
            assert_eq!(r.next_u64(), mix64(seed.wrapping_add(i.wrapping_mul(GOLDEN_GAMMA))));
        }
    }

    #[test]
    fn fnv_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn below_in_range() {
        let mut r = SplitMix64::new(7);
        for n in 1..50 {
            for _ in 0..20 {
                assert!(r.below(n) < n);
            }
        }
    }

    #[test]
    fn choose_is_distinct_sorted() {
        let mut r = SplitMix64::new(3);
        let c = r.choose_indices(100, 40);
        assert_eq!(c.len(), 40);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r.clone().choose_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }
}
