use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;

/// Seeded, platform-independent pseudorandom generator.
///
/// Child streams come from [`Rng::split`] and depend only on the parent's
/// seed and the stream id, never on how far the parent has advanced.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, stream_id: u64) -> Rng {
        let salt = splitmix64(stream_id ^ 0x6a09_e667_f3bc_c909);
        Rng::new(splitmix64(self.seed ^ salt).rotate_left(17) ^ salt)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Half-width of the uniform Glorot interval, `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform Glorot initialization of a `[fan_out × fan_in]` weight matrix.
pub fn xavier_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    assert!(fan_in >= 1 && fan_out >= 1, "xavier_init needs positive fans");
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Matrix::from_vec(fan_out, fan_in, data).expect("length matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(draws(&mut Rng::new(9), 50), draws(&mut Rng::new(9), 50));
    }

    #[test]
    fn split_streams_differ_and_repeat() {
        let root = Rng::new(1);
        let a = draws(&mut root.split(0), 100);
        let b = draws(&mut root.split(1), 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
        assert_eq!(a, draws(&mut root.split(0), 100));
        // split ignores how far the parent has advanced
        let mut advanced = Rng::new(1);
        advanced.uniform();
        assert_eq!(a, draws(&mut advanced.split(0), 100));
        assert_ne!(a, draws(&mut Rng::new(1), 100));
    }

    #[test]
    fn split_streams_are_uncorrelated() {
        let root = Rng::new(2024);
        let streams: Vec<Vec<f64>> = (0..64).map(|id| draws(&mut root.split(id), 10_000)).collect();
        let n = 10_000usize;
        for i in 0..streams.len() {
            for j in (i + 1)..streams.len() {
                // lag-1 cross-correlation: x_t against y_{t+1}
                let x = &streams[i][..n - 1];
                let y = &streams[j][1..];
                let r = pearson(x, y);
                assert!(r.abs() < 0.05, "streams {i},{j}: r = {r}");
            }
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn xavier_respects_bound_and_shape() {
        let w = xavier_init(&mut Rng::new(4), 20, 20);
        assert_eq!(w.shape(), (20, 20));
        let bound = (6.0f64 / 40.0).sqrt();
        assert!((bound - 0.3873).abs() < 1e-4);
        assert!(w.as_slice().iter().all(|v| v.abs() <= bound));

        let tall = xavier_init(&mut Rng::new(4), 784, 20);
        assert_eq!(tall.shape(), (20, 784));
    }

    #[test]
    fn xavier_is_deterministic() {
        let a = xavier_init(&mut Rng::new(77), 13, 7);
        let b = xavier_init(&mut Rng::new(77), 13, 7);
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn xavier_moments_match_uniform_distribution() {
        // 100_000 entries: 400 x 250
        let w = xavier_init(&mut Rng::new(12345), 250, 400);
        let bound = xavier_bound(250, 400);
        let xs = w.as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected_var = bound * bound / 3.0;
        let std_err = (expected_var / n).sqrt();
        assert!(mean.abs() < 3.0 * std_err, "mean {mean} vs 3se {}", 3.0 * std_err);
        assert!((var - expected_var).abs() < 0.1 * expected_var);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(8).permutation(10);
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }
}
