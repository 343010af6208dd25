use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded, stream-addressable random source.
///
/// Backed by ChaCha8, which is counter based: `(seed, stream)` fixes the
/// whole output sequence on every platform. Parallel work derives one child
/// stream per task with [`RngState::derive`] so results never depend on how
/// tasks are scheduled.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream for task `index`; does not advance `self`.
    pub fn derive(&self, index: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x5851_F42D))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n as u64) as usize
    }

    /// Standard normal draw (Box-Muller; the second variate of each pair is
    /// cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform_open().ln()).sqrt();
        let theta = std::f64::consts::TAU * self.uniform();
        let (s, c) = theta.sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn gaussians(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// `k` distinct indices from `0..n` in random order (partial
    /// Fisher-Yates).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.sample_without_replacement(n, n)
    }
}

/// `n` iid standard normal draws from `state`, advancing it.
pub fn rng_gaussian(state: &mut RngState, n: usize) -> Vec<f64> {
    state.gaussians(n)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_same_sequence() {
        let a = rng_gaussian(&mut RngState::new(42, 3), 1000);
        let b = rng_gaussian(&mut RngState::new(42, 3), 1000);
        assert_eq!(a, b);
        let c = rng_gaussian(&mut RngState::new(42, 4), 1000);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_of_a_million_draws() {
        let n = 1_000_000;
        let z = rng_gaussian(&mut RngState::new(2024, 0), n);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 3 sigma bounds: 3/sqrt(n) and 3*sqrt(2/n) ~ 0.0042
        assert!(mean.abs() <= 0.004, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.005, "var {var}");
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let n = 100_000;
        let root = RngState::new(9, 0);
        let a = rng_gaussian(&mut root.derive(0), n);
        let b = rng_gaussian(&mut root.derive(1), n);
        let r = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
            / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
        assert!(r.abs() <= 0.01, "r = {r}");
    }

    #[test]
    fn derive_does_not_advance_parent() {
        let root = RngState::new(1, 1);
        let mut a = root.clone();
        let _ = root.derive(5);
        let mut b = root.clone();
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(root.derive(0).stream(), root.derive(1).stream());
    }

    #[test]
    fn sampling_without_replacement_is_distinct() {
        let mut rng = RngState::new(5, 0);
        let mut idx = rng.sample_without_replacement(50, 20);
        assert_eq!(idx.len(), 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
        assert!(idx.iter().all(|&i| i < 50));
        let mut p = rng.permutation(10);
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_ranges() {
        let mut rng = RngState::new(3, 0);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            let v = rng.uniform_open();
            assert!(v > 0.0 && v <= 1.0);
        }
    }
}
