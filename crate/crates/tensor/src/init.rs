//! Weight initializers. All draw from the caller's seeded generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(−b, b) with b = √(6 / fan_in).
    KaimingUniform { fan_in: usize },
    /// N(0, std²) resampled until within ±2·std.
    TruncNormal { std: f64 },
}

impl Init {
    pub fn tensor<T: Element, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, rng)
            }
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break T::of(v);
                        }
                    })
                    .collect();
                Tensor::from_vec(shape, data).expect("init shape")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn kaiming_bound_and_trunc_normal_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = Init::KaimingUniform { fan_in: 24 }.tensor(&[1000], &mut rng);
        assert!(t.max_abs() <= 0.5);
        let t: Tensor<f64> = Init::TruncNormal { std: 0.02 }.tensor(&[1000], &mut rng);
        assert!(t.max_abs() <= 0.04);
        let sd = (t.data().iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
        assert!(sd > 0.01 && sd < 0.02, "{sd}");
    }
}
