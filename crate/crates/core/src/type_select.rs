//! Garment-class embedding fused additively into the time embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uvpaint_nn::act::{silu_backward_slice, silu_slice};
use uvpaint_nn::{Linear, Module, Param};

use crate::error::{Error, Result};
use crate::synth::TypeLabel;

/// Longest wavelength of the class-index encoding, in index units.
pub const MAX_PERIOD: f64 = 10_000.0;

/// Interleaved `[sin(i·ω_0), cos(i·ω_0), sin(i·ω_1), …]` of the class index
/// `i`, with `ω_k = MAX_PERIOD^(-k/n)`. Output length is `2·n`.
pub fn pos_emb(one_hot: &[f32], frequencies: usize) -> Result<Vec<f32>> {
    let label = TypeLabel::from_one_hot(one_hot)?;
    Ok(pos_emb_index(label.index(), frequencies))
}

pub fn pos_emb_index(index: usize, frequencies: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * frequencies);
    for k in 0..frequencies {
        let w = MAX_PERIOD.powf(-(k as f64) / frequencies as f64);
        let a = index as f64 * w;
        out.push(a.sin() as f32);
        out.push(a.cos() as f32);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeEmbedderConfig {
    pub frequencies: usize,
    pub dim: usize,
}

/// Two-layer MLP over [`pos_emb`]. The output layer starts at zero, so an
/// untrained embedder adds nothing to the time embedding.
#[derive(Clone, Debug)]
pub struct TypeEmbedder {
    pub frequencies: usize,
    pub dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Intermediate values of one embedding, for the backward pass.
#[derive(Clone, Debug)]
pub struct TypeEmbedCache {
    feat: Vec<f32>,
    pre: Vec<f32>,
    act: Vec<f32>,
}

impl TypeEmbedder {
    pub fn new(frequencies: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if frequencies < 2 || dim == 0 {
            return Err(Error::Config(format!("type embedder needs >= 2 frequencies and dim > 0, got {frequencies}, {dim}")));
        }
        Ok(Self {
            frequencies,
            dim,
            fc1: Linear::new(2 * frequencies, dim, rng),
            fc2: Linear::new(dim, dim, rng).zero_init(),
        })
    }

    pub fn forward(&self, label: TypeLabel) -> (Vec<f32>, TypeEmbedCache) {
        let feat = pos_emb_index(label.index(), self.frequencies);
        let pre = self.fc1.forward(&feat);
        let act = silu_slice(&pre);
        let out = self.fc2.forward(&act);
        (out, TypeEmbedCache { feat, pre, act })
    }

    /// Accumulates parameter gradients for `d_out`.
    pub fn backward(&mut self, cache: &TypeEmbedCache, d_out: &[f32]) {
        let d_act = self.fc2.backward(&cache.act, d_out);
        let d_pre = silu_backward_slice(&cache.pre, &d_act);
        self.fc1.backward(&cache.feat, &d_pre);
    }

    /// `F_cls = ProjectEmb(PosEmb(one_hot)) + t_emb`.
    pub fn fuse(&self, one_hot: &[f32], t_emb: &[f32]) -> Result<Vec<f32>> {
        if t_emb.len() != self.dim {
            return Err(Error::Shape(format!("time embedding has {} dims, embedder {}", t_emb.len(), self.dim)));
        }
        let label = TypeLabel::from_one_hot(one_hot)?;
        Ok(type_time_fuse_with(&self.forward(label).0, t_emb))
    }
}

pub(crate) fn type_time_fuse_with(class_emb: &[f32], t_emb: &[f32]) -> Vec<f32> {
    class_emb.iter().zip(t_emb).map(|(a, b)| a + b).collect()
}

/// Free-function form of [`TypeEmbedder::fuse`].
pub fn type_time_fuse(embedder: &TypeEmbedder, one_hot: &[f32], t_emb: &[f32]) -> Result<Vec<f32>> {
    embedder.fuse(one_hot, t_emb)
}

impl Module for TypeEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use uvpaint_nn::init_rng;

    #[test]
    fn class_zero_is_sin_zero_cos_one() {
        let e = pos_emb(&[1.0, 0.0, 0.0], 8).unwrap();
        assert_eq!(e.len(), 16);
        for k in 0..8 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn classes_are_distinct_and_deterministic() {
        let a = pos_emb(&[0.0, 1.0, 0.0], 8).unwrap();
        let b = pos_emb(&[0.0, 0.0, 1.0], 8).unwrap();
        let d: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(d > 0.0);
        assert_eq!(a, pos_emb(&[0.0, 1.0, 0.0], 8).unwrap());
        // independent evaluation of the second pair
        let w1 = 10_000f64.powf(-1.0 / 8.0);
        assert!((a[2] as f64 - w1.sin()).abs() < 1e-6);
        assert!((a[3] as f64 - w1.cos()).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_one_hot() {
        assert!(pos_emb(&[0.5, 0.5, 0.0], 8).is_err());
        assert!(pos_emb(&[1.0, 1.0, 0.0], 8).is_err());
        assert!(pos_emb(&[1.0, 0.0], 8).is_err());
    }

    #[test]
    fn fuse_is_identity_at_init_and_additive() {
        let mut rng = init_rng(1);
        let mut emb = TypeEmbedder::new(8, 32, &mut rng).unwrap();
        let t1: Vec<f32> = (0..32).map(|i| i as f32 * 0.1).collect();
        let t2: Vec<f32> = (0..32).map(|i| (i as f32).sin()).collect();
        let oh = TypeLabel::Bottom.one_hot();
        assert_eq!(emb.fuse(&oh, &t1).unwrap(), t1);
        assert!(emb.fuse(&oh, &t1[..8]).is_err());

        // any nonzero output layer separates classes
        emb.fc2.weight.value.iter_mut().enumerate().for_each(|(i, w)| *w = ((i * 7) % 13) as f32 * 0.01 - 0.06);
        let a = emb.fuse(&TypeLabel::Top.one_hot(), &t1).unwrap();
        let b = emb.fuse(&TypeLabel::Onepiece.one_hot(), &t1).unwrap();
        assert_ne!(a, b);
        let f1 = emb.fuse(&oh, &t1).unwrap();
        let f2 = emb.fuse(&oh, &t2).unwrap();
        for i in 0..32 {
            assert!(((f1[i] - f2[i]) - (t1[i] - t2[i])).abs() < 1e-5);
        }
    }
}
