use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::{Shape, Tensor};

/// The random stream used throughout the crate. Seeded streams are
/// reproducible across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn standard_normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn standard_normal_tensor(rng: &mut Rng, shape: Shape) -> Tensor {
    Tensor::from_vec(shape, standard_normal_vec(rng, shape.numel()))
        .expect("length matches shape")
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.gen::<f64>()
}
