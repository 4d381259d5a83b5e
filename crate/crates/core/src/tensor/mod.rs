//! Minimal reverse-mode autodiff over dense `f64` tensors.

mod adam;
mod array;
mod fpu;
pub mod ops;
mod rng;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Tensor;
pub use fpu::FlushDenormals;
pub use rng::Rng;
pub use tape::{Gradients, Mode, Tape, Var};

/// Glorot-uniform sample: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.uniform_range(-limit, limit);
    }
    t
}
