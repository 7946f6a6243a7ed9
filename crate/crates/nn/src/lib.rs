//! Minimal CPU layers for small convolutional and attention networks.
//!
//! Every layer pairs a `forward` returning an explicit cache with a
//! `backward` that accumulates parameter gradients and returns the input
//! gradient. There is no autograd tape; composite networks call the pieces
//! in reverse order themselves.

pub mod act;
pub mod attention;
pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod param;
pub mod resblock;
pub mod tensor;

pub use attention::{AttentionCache, SelfAttention};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::GroupNorm;
pub use optim::Adam;
pub use param::{Module, Param};
pub use resblock::{ResBlock, ResBlockCache};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used for all parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sinusoidal embedding of a scalar: `[sin(v·ω_0), …, sin(v·ω_{n-1}), cos(v·ω_0), …]`
/// with `ω_k = max_period^(-k/n)` and `n = dim / 2`.
pub fn sinusoidal_embedding(value: f32, dim: usize, max_period: f32) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(max_period.ln()) * k as f32 / half as f32).exp();
        out[k] = (value * freq).sin();
        out[half + k] = (value * freq).cos();
    }
    out
}
