//! Seeded random tensor initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Normal { mean: f64, std: f64 },
    /// Half-open `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// Normal with `std = sqrt(2 / fan_in)`, the ReLU gain, where `fan_in`
    /// is the product of all extents after the first.
    KaimingFanIn,
}

/// Deterministic initialization: identical `(kind, shape, seed)` gives
/// bit-identical buffers.
pub fn seeded_init<T: Element>(kind: InitKind, shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = match kind {
        InitKind::Normal { mean, std } => {
            let dist = Normal::new(mean, std)
                .ok()
                .filter(|_| std > 0.0)
                .ok_or_else(|| Error::invalid("seeded_init", format!("normal std must be > 0, got {std}")))?;
            (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
        }
        InitKind::Uniform { low, high } => {
            if !(low < high) {
                return Err(Error::invalid("seeded_init", format!("uniform needs low < high, got [{low}, {high})")));
            }
            let dist = Uniform::new(low, high).map_err(|e| Error::invalid("seeded_init", e.to_string()))?;
            (0..n)
                .map(|_| {
                    // Rounding to f32 can land exactly on `high`.
                    let v = T::of(dist.sample(&mut rng));
                    if v >= T::of(high) { T::of(low) } else { v }
                })
                .collect()
        }
        InitKind::KaimingFanIn => {
            let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::invalid("seeded_init", e.to_string()))?;
            (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
        }
    };
    Tensor::new(data, shape)
}

/// Stable 64-bit seed derived from a base seed and a name (FNV-1a).
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_buffer() {
        let a: Tensor<f32> = seeded_init(InitKind::KaimingFanIn, &[4, 3, 3, 3], 7).unwrap();
        let b: Tensor<f32> = seeded_init(InitKind::KaimingFanIn, &[4, 3, 3, 3], 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c: Tensor<f32> = seeded_init(InitKind::KaimingFanIn, &[4, 3, 3, 3], 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn normal_sample_mean() {
        let x: Tensor<f64> = seeded_init(InitKind::Normal { mean: 0.0, std: 1.0 }, &[100_000], 3).unwrap();
        let mean = x.data().iter().sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn uniform_range() {
        let x: Tensor<f32> = seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, &[50_000], 11).unwrap();
        assert!(x.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn invalid_parameters() {
        assert!(seeded_init::<f32>(InitKind::Normal { mean: 0.0, std: 0.0 }, &[3], 0).is_err());
        assert!(seeded_init::<f32>(InitKind::Uniform { low: 1.0, high: 1.0 }, &[3], 0).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(1, "conv1.weight"), derive_seed(1, "conv2.weight"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }
}
