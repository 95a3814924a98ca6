//! Deterministic pseudo-random numbers.
//!
//! Everything stochastic in this crate draws from [`SplitMix64`] (Steele,
//! Lea & Flood's 64-bit mixer, the seeding generator of `java.util.SplittableRandom`).
//! It is portable across platforms, has no global state, and new independent
//! streams can be derived from a base seed plus integer labels, so any work
//! item (a RANSAC iteration, a frame pair, an optimizer step) owns its own
//! generator and results do not depend on evaluation order.

/// SplitMix64 generator. One `u64` of state, one multiply-xor-shift mix per draw.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

/// Finalization mix of SplitMix64, also used to hash stream labels.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent generator from `seed` and a label path.
    ///
    /// The same `(seed, labels)` always yields the same stream, and distinct
    /// label paths yield streams that do not overlap in practice.
    pub fn stream(seed: u64, labels: &[u64]) -> Self {
        let mut s = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for &l in labels {
            s = mix64(s ^ mix64(l.wrapping_add(0x2545_f491_4f6c_dd1d)));
        }
        Self { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal deviate (Box-Muller, one value per pair of draws).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `k` distinct indices from `[0, n)` by partial Fisher-Yates.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = SplitMix64::stream(7, &[1, 2]);
        let mut b = SplitMix64::stream(7, &[1, 2]);
        let mut c = SplitMix64::stream(7, &[2, 1]);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn uniform_mean_and_range() {
        let mut rng = SplitMix64::new(11);
        let mut sum = 0.0;
        for _ in 0..20_000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
            sum += v;
        }
        assert!((sum / 20_000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn normal_moments() {
        let mut rng = SplitMix64::new(3);
        let n = 50_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            m1 += x;
            m2 += x * x;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 0.02, "mean {m1}");
        assert!((m2 - 1.0).abs() < 0.03, "var {m2}");
    }

    #[test]
    fn next_below_covers_all_residues() {
        let mut rng = SplitMix64::new(5);
        let mut hits = [0usize; 7];
        for _ in 0..7_000 {
            hits[rng.next_below(7) as usize] += 1;
        }
        for (i, &h) in hits.iter().enumerate() {
            assert!(h > 800, "residue {i} undersampled: {h}");
        }
    }

    #[test]
    fn sample_distinct_has_no_duplicates() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..200 {
            let mut s = rng.sample_distinct(20, 8);
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 8);
        }
    }
}
