use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::conv::{ConvSpec, LayerParams};

/// Bound `b` of the uniform initializer, `√(6 / fan_in)`.
pub fn he_bound(spec: &ConvSpec) -> f64 {
    (6.0 / spec.fan_in() as f64).sqrt()
}

/// He-uniform weights `U(-b, b)` with zero bias, deterministic per seed.
pub fn he_init<T: Scalar>(spec: &ConvSpec, seed: u64) -> Result<LayerParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = he_bound(spec);
    let weights = Tensor::from_fn(&spec.weight_shape(), |_| T::of(rng.random_range(-b..b)))?;
    let bias = if spec.use_bias {
        Some(Tensor::zeros(&[spec.out_channels])?)
    } else {
        None
    };
    Ok(LayerParams { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = ConvSpec::same([3, 3, 3], 4, 16);
        let a = he_init::<f32>(&spec, 11).unwrap();
        let b = he_init::<f32>(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, he_init::<f32>(&spec, 12).unwrap());
        assert!(a.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bound_for_3x3x3_cin4() {
        let spec = ConvSpec::same([3, 3, 3], 4, 16);
        assert!((he_bound(&spec) - 0.235_702_260_4).abs() < 1e-9);
        let p = he_init::<f64>(&spec, 3).unwrap();
        let b = he_bound(&spec);
        assert!(p.weights.data().iter().all(|&v| v.abs() < b));
    }

    #[test]
    fn sample_mean_near_zero() {
        // 100 000 draws: Cin·Cout = 100 000 with a 1×1×1 kernel.
        let spec = ConvSpec::same([1, 1, 1], 400, 250);
        let p = he_init::<f64>(&spec, 5).unwrap();
        let n = p.weights.len() as f64;
        assert_eq!(n, 1e5);
        let b = he_bound(&spec);
        let sigma = b / 3f64.sqrt();
        let mean = p.weights.sum() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    }
}
