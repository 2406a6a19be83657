//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator. A stream is identified by the run
//! seed plus a path of integer keys (purpose, window, sample, ...); the path
//! is folded into a derived seed and the final key selects the ChaCha stream,
//! so sibling streams never overlap and each one is independent of how many
//! draws its siblings made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

pub use rand_chacha::ChaCha8Rng as StreamRng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root of a family of deterministic streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child family keyed by `key`.
    pub fn child(&self, key: u64) -> RngStream {
        RngStream {
            seed: splitmix64(self.seed ^ splitmix64(key.wrapping_add(0xA5A5_A5A5))),
        }
    }

    /// Generator for stream `index` of this family.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

pub fn rng_stream(seed: u64) -> RngStream {
    RngStream::new(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Standard-normal tensor of the given shape.
pub fn rng_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = rng_normal(&mut rng_stream(42).rng(0), &[5, 3]);
        let b = rng_normal(&mut rng_stream(42).rng(0), &[5, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_distinct() {
        let root = rng_stream(42);
        let a = rng_normal(&mut root.rng(0), &[16]);
        let b = rng_normal(&mut root.rng(1), &[16]);
        let c = rng_normal(&mut root.child(1).rng(0), &[16]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn moments_of_many_draws() {
        let x = rng_normal(&mut rng_stream(7).rng(3), &[100_000]);
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }
}
