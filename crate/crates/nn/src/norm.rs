use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

/// Group normalisation with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    /// Largest group count `<= preferred` that divides `channels`.
    pub fn fitting(preferred: usize, channels: usize) -> Self {
        let g = (1..=preferred.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self::new(g, channels)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, GroupNormCache) {
        assert_eq!(x.c, self.channels);
        let per = self.channels / self.groups;
        let plane = x.plane();
        let n = (per * plane) as f64;
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let range = g * per * plane..(g + 1) * per * plane;
            let xs = &x.data[range.clone()];
            let mean = xs.iter().map(|v| *v as f64).sum::<f64>() / n;
            let var = xs.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps as f64).sqrt();
            inv_std.push(is as f32);
            for (o, v) in xhat.data[range].iter_mut().zip(xs) {
                *o = ((*v as f64 - mean) * is) as f32;
            }
        }
        for c in 0..x.c {
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            for (o, v) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = ga * v + be;
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Tensor) -> Tensor {
        let per = self.channels / self.groups;
        let plane = dy.plane();
        let n = (per * plane) as f32;
        let mut dxhat = Tensor::zeros(dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let mut gs = 0.0f32;
            let mut bs = 0.0f32;
            for (d, xh) in dy.channel(c).iter().zip(cache.xhat.channel(c)) {
                gs += d * xh;
                bs += d;
            }
            self.gamma.grad[c] += gs;
            self.beta.grad[c] += bs;
            let ga = self.gamma.value[c];
            for (o, d) in dxhat.channel_mut(c).iter_mut().zip(dy.channel(c)) {
                *o = d * ga;
            }
        }
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        for g in 0..self.groups {
            let range = g * per * plane..(g + 1) * per * plane;
            let dxh = &dxhat.data[range.clone()];
            let xh = &cache.xhat.data[range.clone()];
            let mean_d = dxh.iter().sum::<f32>() / n;
            let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / n;
            let is = cache.inv_std[g];
            for ((o, d), h) in dx.data[range].iter_mut().zip(dxh).zip(xh) {
                *o = is * (d - mean_d - h * mean_dx);
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
