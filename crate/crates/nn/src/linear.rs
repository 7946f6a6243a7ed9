use rand_chacha::ChaCha8Rng;

use crate::param::{join, Module, Param};

/// Affine map on plain vectors, `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            d_in,
            d_out,
            weight: Param::uniform(&[d_out, d_in], d_in, 3f32.sqrt(), rng),
            bias: Param::zeros(&[d_out]),
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.d_in, "linear input dimension");
        (0..self.d_out)
            .map(|o| {
                let row = &self.weight.value[o * self.d_in..(o + 1) * self.d_in];
                self.bias.value[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.d_in];
        for (o, d) in dy.iter().enumerate() {
            self.bias.grad[o] += d;
            let row = o * self.d_in;
            for i in 0..self.d_in {
                self.weight.grad[row + i] += d * x[i];
                dx[i] += d * self.weight.value[row + i];
            }
        }
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
