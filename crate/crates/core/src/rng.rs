//! Counter-based random values: every draw is keyed by its coordinates, so
//! results never depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ir::{Shape, TensorValue};

/// Stable 64-bit FNV-1a hash.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn stream(seed: u64, key: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.rotate_left(17));
    rng.set_stream(counter);
    rng
}

/// Uniform value in `[0, 1)` for `(seed, key, counter)`.
pub fn uniform(seed: u64, key: u64, counter: u64) -> f32 {
    stream(seed, key, counter).random::<f32>()
}

/// Standard normal value for `(seed, key, counter)`.
pub fn normal(seed: u64, key: u64, counter: u64) -> f32 {
    stream(seed, key, counter).sample(StandardNormal)
}

/// Tensor of standard normals keyed by `(seed, name, flat index)`.
pub fn normal_tensor(seed: u64, name: &str, shape: &Shape) -> TensorValue {
    let key = name_key(name);
    let data = (0..shape.num_elements() as u64).map(|i| normal(seed, key, i)).collect();
    TensorValue::new(shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_keyed() {
        assert_eq!(normal(1, 2, 3), normal(1, 2, 3));
        assert_ne!(normal(1, 2, 3), normal(1, 2, 4));
        assert_ne!(normal(1, 2, 3), normal(2, 2, 3));
        let u = uniform(7, name_key("x"), 0);
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn normals_look_standard() {
        let t = normal_tensor(3, "w", &Shape::new([4000]));
        let mean = t.data.iter().sum::<f32>() / 4000.0;
        let var = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / 4000.0;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1, "mean {mean} var {var}");
    }
}
