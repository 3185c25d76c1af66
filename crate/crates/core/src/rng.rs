//! Seeded pseudo-random number generation.
//!
//! All randomness in this crate (sampling, augmentation, synthetic data,
//! parameter init) flows through [`Rng`], a xoshiro256** generator seeded via
//! splitmix64. Both algorithms are fully specified below so fixtures pinned in
//! tests are portable across implementations:
//!
//! * seeding: four state words produced by iterating splitmix64
//!   (`z = s += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`).
//! * step: xoshiro256** (`result = rotl(s1 * 5, 7) * 9`, followed by the
//!   xoshiro256 state transition with shifts 17/45).
//!
//! Floats in `[0, 1)` take the top 53 bits of a step: `(x >> 11) * 2^-53`.

/// Deterministic xoshiro256** generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(seed: &mut u64) -> u64 {
    *seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *seed;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    /// Seed the generator from a single word.
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        Rng {
            state: [
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
            ],
        }
    }

    /// Derive an independent stream for a subsystem. `tag` values must be
    /// distinct per call site; the derived seed is `splitmix64(seed ^ tag)`.
    pub fn derive(&mut self, tag: u64) -> Rng {
        Rng::new(self.next_u64() ^ tag)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fair coin flip (top bit of one step).
    pub fn flip(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// Standard normal via Box-Muller: `sqrt(-2 ln u1) * cos(2 pi u2)`
    /// with `u1` in `(0, 1]`. Two uniforms are consumed per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `n` distinct indices drawn from `[0, total)` by a partial Fisher-Yates
    /// shuffle: for `i` in `0..n`, swap position `i` with `i + below(total - i)`
    /// and keep the first `n` entries.
    pub fn sample_without_replacement(&mut self, total: usize, n: usize) -> Vec<usize> {
        assert!(n <= total);
        let mut idx: Vec<usize> = (0..total).collect();
        for i in 0..n {
            let j = i + self.below(total - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }

    /// Full permutation of `[0, n)`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.sample_without_replacement(n, n)
    }

    /// Raw state words, for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state(state: [u64; 4]) -> Self {
        Rng { state }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(3);
        for n in 1..40 {
            for _ in 0..50 {
                assert!(rng.below(n) < n);
            }
        }
    }

    #[test]
    fn sample_without_replacement_is_distinct() {
        let mut rng = Rng::new(11);
        let s = rng.sample_without_replacement(20, 12);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(s.iter().all(|&i| i < 20));
    }

    #[test]
    fn full_sample_is_permutation() {
        let mut rng = Rng::new(5);
        let mut p = rng.permutation(16);
        p.sort_unstable();
        assert_eq!(p, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn state_round_trip() {
        let mut a = Rng::new(42);
        a.next_u64();
        let mut b = Rng::from_state(a.state());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_has_sane_moments() {
        let mut rng = Rng::new(1);
        let n = 20000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
