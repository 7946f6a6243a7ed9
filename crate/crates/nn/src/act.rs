//! Pointwise activations.

use crate::tensor::Tensor;

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_slice(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| v * sigmoid(*v)).collect()
}

/// Gradient of SiLU given the pre-activation input.
pub fn silu_backward_slice(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(v, d)| {
            let s = sigmoid(*v);
            d * (s + v * s * (1.0 - s))
        })
        .collect()
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.c, x.h, x.w, silu_slice(&x.data))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_vec(x.c, x.h, x.w, silu_backward_slice(&x.data, &dy.data))
}
