use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Array;

/// Deterministic random stream.
///
/// Backed by a counter-based ChaCha generator: `(seed, key)` select a seed and
/// an independent stream, so substreams for different doors or purposes never
/// overlap and can be consumed in any order or on any thread.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, &[])
    }

    /// Substream identified by a key path, e.g. `[purpose, door_index]`.
    pub fn keyed(seed: u64, key: &[u64]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = key
            .iter()
            .fold(0x5353_4E50_u64, |acc, &k| splitmix(acc ^ splitmix(k)));
        rng.set_stream(stream);
        Self {
            rng,
            spare_normal: None,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.gen_range(0..n)
    }

    /// `+1` or `-1` with equal probability.
    pub fn sign(&mut self) -> i8 {
        if self.rng.gen::<bool>() {
            1
        } else {
            -1
        }
    }

    /// Standard normal draw (Box–Muller, pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn normal_array(&mut self, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Array::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
