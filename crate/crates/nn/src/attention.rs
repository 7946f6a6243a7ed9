use rand_chacha::ChaCha8Rng;

use crate::conv::{Conv2d, ConvCache};
use crate::gemm::gemm;
use crate::norm::{GroupNorm, GroupNormCache};
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

/// Residual multi-head self-attention over all spatial positions of a
/// feature map. There is no key/value input from outside the map.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub channels: usize,
    pub heads: usize,
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    norm: GroupNormCache,
    qkv_cache: ConvCache,
    qkv: Tensor,
    /// Row-stochastic attention, `heads × N × N`, rows are queries.
    pub probs: Vec<f32>,
    o_cache: ConvCache,
    pub tokens: usize,
}

impl AttentionCache {
    /// Attention matrix of one head, `N × N` row-major (query-major).
    pub fn head(&self, h: usize) -> &[f32] {
        let n2 = self.tokens * self.tokens;
        &self.probs[h * n2..(h + 1) * n2]
    }

    /// Head-averaged attention matrix.
    pub fn mean_over_heads(&self) -> Vec<f32> {
        let n2 = self.tokens * self.tokens;
        let heads = self.probs.len() / n2;
        let mut out = vec![0.0f32; n2];
        for h in 0..heads {
            for (o, p) in out.iter_mut().zip(self.head(h)) {
                *o += p / heads as f32;
            }
        }
        out
    }
}

impl SelfAttention {
    pub fn new(channels: usize, heads: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && channels % heads == 0, "{channels} channels not divisible into {heads} heads");
        Self {
            channels,
            heads,
            norm: GroupNorm::fitting(groups, channels),
            qkv: Conv2d::new(channels, 3 * channels, 1, 1, rng),
            proj: Conv2d::new(channels, channels, 1, 1, rng),
        }
    }

    pub fn zero_init_output(mut self) -> Self {
        self.proj = self.proj.zero_init();
        self
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, AttentionCache) {
        let c = self.channels;
        let n = x.plane();
        let d = c / self.heads;
        let scale = 1.0 / (d as f32).sqrt();
        let (hn, norm) = self.norm.forward(x);
        let (qkv, qkv_cache) = self.qkv.forward(&hn);
        let (q, rest) = qkv.data.split_at(c * n);
        let (k, v) = rest.split_at(c * n);
        let mut probs = vec![0.0f32; self.heads * n * n];
        let mut o = Tensor::zeros(c, x.h, x.w);
        for h in 0..self.heads {
            let qh = &q[h * d * n..(h + 1) * d * n];
            let kh = &k[h * d * n..(h + 1) * d * n];
            let vh = &v[h * d * n..(h + 1) * d * n];
            let a = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(true, false, n, n, d, scale, qh, kh, 0.0, a);
            for row in a.chunks_mut(n) {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut s = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    s += *r;
                }
                row.iter_mut().for_each(|r| *r /= s);
            }
            gemm(false, true, d, n, n, 1.0, vh, a, 0.0, &mut o.data[h * d * n..(h + 1) * d * n]);
        }
        let (mut y, o_cache) = self.proj.forward(&o);
        y.add_assign(x);
        (y, AttentionCache { norm, qkv_cache, qkv, probs, o_cache, tokens: n })
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Tensor) -> Tensor {
        let c = self.channels;
        let n = cache.tokens;
        let d = c / self.heads;
        let scale = 1.0 / (d as f32).sqrt();
        let d_o = self.proj.backward(&cache.o_cache, dy);
        let (q, rest) = cache.qkv.data.split_at(c * n);
        let (k, v) = rest.split_at(c * n);
        let mut dqkv = Tensor::zeros(3 * c, dy.h, dy.w);
        let mut da = vec![0.0f32; n * n];
        for h in 0..self.heads {
            let sl = h * d * n..(h + 1) * d * n;
            let a = cache.head(h);
            let doh = &d_o.data[sl.clone()];
            gemm(true, false, n, n, d, 1.0, doh, &v[sl.clone()], 0.0, &mut da);
            // softmax backward, row-wise
            for (drow, arow) in da.chunks_mut(n).zip(a.chunks(n)) {
                let dot: f32 = drow.iter().zip(arow).map(|(x, y)| x * y).sum();
                for (g, p) in drow.iter_mut().zip(arow) {
                    *g = p * (*g - dot);
                }
            }
            let (dq, dkv) = dqkv.data.split_at_mut(c * n);
            let (dk, dv) = dkv.split_at_mut(c * n);
            gemm(false, false, d, n, n, 1.0, doh, a, 0.0, &mut dv[sl.clone()]);
            gemm(false, true, d, n, n, scale, &k[sl.clone()], &da, 0.0, &mut dq[sl.clone()]);
            gemm(false, false, d, n, n, scale, &q[sl.clone()], &da, 0.0, &mut dk[sl.clone()]);
        }
        let dhn = self.qkv.backward(&cache.qkv_cache, &dqkv);
        let mut dx = self.norm.backward(&cache.norm, &dhn);
        dx.add_assign(dy);
        dx
    }
}

impl Module for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
