//! Xavier (Glorot) initialization.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XavierVariant {
    /// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    #[default]
    Uniform,
    /// Normal with standard deviation `sqrt(2 / (fan_in + fan_out))`.
    Normal,
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A `fan_out × fan_in` weight matrix of i.i.d. Xavier-distributed entries.
///
/// # Panics
/// If either fan is zero.
pub fn xavier_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    xavier_init_with(XavierVariant::Uniform, fan_in, fan_out, rng)
}

pub fn xavier_init_with<R: Rng + ?Sized>(
    variant: XavierVariant,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Array2<f64> {
    assert!(fan_in >= 1 && fan_out >= 1, "xavier fans must be positive");
    let values = xavier_values(variant, fan_in, fan_out, fan_in * fan_out, rng);
    Array2::from_shape_vec((fan_out, fan_in), values).expect("shape matches")
}

/// `n` Xavier draws for a layer with the given fans (convolution fans include the
/// kernel area).
pub(crate) fn xavier_values<R: Rng + ?Sized>(
    variant: XavierVariant,
    fan_in: usize,
    fan_out: usize,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    match variant {
        XavierVariant::Uniform => {
            let a = xavier_bound(fan_in, fan_out);
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        }
        XavierVariant::Normal => {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_bound() {
        assert_eq!(xavier_bound(3, 3), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = xavier_init(3, 3, &mut rng);
        assert_eq!(m.dim(), (3, 3));
        assert!(m.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shape_is_fan_out_by_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(xavier_init(5, 2, &mut rng).dim(), (2, 5));
    }

    #[test]
    fn seeded_draws_repeat() {
        let a = xavier_init(16, 4, &mut ChaCha8Rng::seed_from_u64(42));
        let b = xavier_init(16, 4, &mut ChaCha8Rng::seed_from_u64(42));
        let c = xavier_init(16, 4, &mut ChaCha8Rng::seed_from_u64(43));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_variant_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = xavier_init_with(XavierVariant::Normal, 2048, 2, &mut rng);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 2050.0;
        assert!((var - expected).abs() / expected < 0.1);
    }

    #[test]
    #[should_panic]
    fn zero_fan_panics() {
        xavier_init(0, 2, &mut ChaCha8Rng::seed_from_u64(0));
    }
}
