//! Seeded random-instance helpers shared by unit tests, the acceptance
//! suite, and the gradient-check command.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::{l2_normalize, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with i.i.d. standard-normal entries.
pub fn random_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(dims, data).expect("dims/data constructed consistently")
}

/// Random unit vector of dimension `n`.
pub fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    loop {
        let t = random_tensor(rng, vec![n]);
        if let Ok(u) = l2_normalize(&t) {
            return u;
        }
    }
}
