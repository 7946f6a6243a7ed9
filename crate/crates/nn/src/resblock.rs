use rand_chacha::ChaCha8Rng;

use crate::act::{silu, silu_backward};
use crate::conv::{Conv2d, ConvCache};
use crate::linear::Linear;
use crate::norm::{GroupNorm, GroupNormCache};
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

/// Pre-activation residual block with a per-channel bias injected from a
/// conditioning embedding (time, class, ...).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub cin: usize,
    pub cout: usize,
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub emb: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct ResBlockCache {
    n1: GroupNormCache,
    n1_out: Tensor,
    c1: ConvCache,
    n2: GroupNormCache,
    n2_out: Tensor,
    c2: ConvCache,
    skip: Option<ConvCache>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, emb_dim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cin,
            cout,
            norm1: GroupNorm::fitting(groups, cin),
            conv1: Conv2d::new(cin, cout, 3, 1, rng),
            emb: Linear::new(emb_dim, cout, rng),
            norm2: GroupNorm::fitting(groups, cout),
            conv2: Conv2d::new(cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, rng)),
        }
    }

    pub fn zero_init_output(mut self) -> Self {
        self.conv2 = self.conv2.zero_init();
        self
    }

    /// `emb_act` is the already-activated conditioning vector.
    pub fn forward(&self, x: &Tensor, emb_act: &[f32]) -> (Tensor, ResBlockCache) {
        let (n1_out, n1) = self.norm1.forward(x);
        let (mut h1, c1) = self.conv1.forward(&silu(&n1_out));
        let bias = self.emb.forward(emb_act);
        for (c, b) in bias.iter().enumerate() {
            h1.channel_mut(c).iter_mut().for_each(|v| *v += b);
        }
        let (n2_out, n2) = self.norm2.forward(&h1);
        let (mut y, c2) = self.conv2.forward(&silu(&n2_out));
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                y.add_assign(&s);
                Some(cache)
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        (y, ResBlockCache { n1, n1_out, c1, n2, n2_out, c2, skip })
    }

    /// Returns `(dx, d_emb_act)`.
    pub fn backward(&mut self, cache: &ResBlockCache, emb_act: &[f32], dy: &Tensor) -> (Tensor, Vec<f32>) {
        let d_act2 = self.conv2.backward(&cache.c2, dy);
        let d_n2 = silu_backward(&cache.n2_out, &d_act2);
        let d_h1 = self.norm2.backward(&cache.n2, &d_n2);
        let d_bias: Vec<f32> = (0..self.cout).map(|c| d_h1.channel(c).iter().sum()).collect();
        let d_emb = self.emb.backward(emb_act, &d_bias);
        let d_act1 = self.conv1.backward(&cache.c1, &d_h1);
        let d_n1 = silu_backward(&cache.n1_out, &d_act1);
        let mut dx = self.norm1.backward(&cache.n1, &d_n1);
        match (&mut self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => dx.add_assign(&conv.backward(sc, dy)),
            _ => dx.add_assign(dy),
        }
        (dx, d_emb)
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.emb.visit(&join(prefix, "emb"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.emb.visit_mut(&join(prefix, "emb"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}
