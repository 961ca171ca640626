//! Deterministic random number generation.
//!
//! The generator is SplitMix64 with Box-Muller for normal deviates. Both are
//! a handful of arithmetic operations on a single 64-bit state word, so the
//! stream is reproducible bit-for-bit from the seed and the state can be
//! serialized into checkpoints as one integer.

/// Seeded generator with a single 64-bit state word.
///
/// Identical seeds produce identical output sequences. The current state can
/// be read back with [`SeededRng::state`] and restored with
/// [`SeededRng::from_state`], which is how checkpoint resume reproduces the
/// exact stream of an uninterrupted run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    /// Rebuilds a generator mid-stream from a serialized state word.
    pub fn from_state(state: u64) -> Self {
        SeededRng { state }
    }

    /// Current state word, suitable for serialization.
    pub fn state(&self) -> u64 {
        self.state
    }

    /// Next 64 uniform bits (SplitMix64).
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal deviate via Box-Muller.
    ///
    /// Consumes exactly two uniform draws per call; the second deviate of the
    /// pair is discarded so the state stays a single word.
    pub fn next_gauss(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1], avoiding ln(0).
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `[0, n)`. `n` must be nonzero.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_stream_for_seed_zero() {
        let mut rng = SeededRng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn matches_reference_stream_for_seed_42() {
        let mut rng = SeededRng::new(42);
        assert_eq!(rng.next_u64(), 0xBDD7_3226_2FEB_6E95);
        assert_eq!(rng.next_u64(), 0x28EF_E333_B266_F103);
        assert_eq!(rng.next_u64(), 0x4752_6757_130F_9F52);
    }

    #[test]
    fn first_f64_draw_is_frozen() {
        let mut rng = SeededRng::new(42);
        assert_eq!(rng.next_f64(), 0.7415648787718233);
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = SeededRng::new(9001);
        let mut b = SeededRng::new(9001);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn state_roundtrip_resumes_the_stream() {
        let mut a = SeededRng::new(7);
        for _ in 0..10 {
            a.next_gauss();
        }
        let mut b = SeededRng::from_state(a.state());
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_draws_stay_in_unit_interval() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn first_gauss_draw_is_frozen() {
        let mut rng = SeededRng::new(7);
        let g = rng.next_gauss();
        assert!(
            (g - 0.9884743323187353).abs() < 1e-12,
            "first normal deviate for seed 7 drifted: {g}"
        );
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(11);
        let mut v: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
