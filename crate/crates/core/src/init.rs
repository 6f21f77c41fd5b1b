use rand::Rng;

use crate::tensor::Tensor;

/// Glorot/Xavier uniform initialization for a `fan_in x fan_out` weight.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("sized by construction")
}

pub fn zeros_row(width: usize) -> Tensor {
    Tensor::zeros(1, width)
}
