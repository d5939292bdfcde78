use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Element, Tensor};

/// He-normal kernel of shape `[kh, kw, Cin, Cout]`: std = sqrt(2 / (kh·kw·Cin)).
pub fn init_kernel<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub fn init_bias<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

/// Stable per-parameter seed: FNV-1a of the name mixed with the model seed.
pub fn param_seed(model_seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ model_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
