use rand_chacha::ChaCha8Rng;

use crate::gemm::gemm;
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

/// 2-D convolution with square kernel, zero padding and integer stride.
///
/// Weights are stored `cout × (cin·k·k)` so the forward pass is a single
/// matrix product against the unfolded input.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k * k;
        Self {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            weight: Param::uniform(&[cout, fan_in], fan_in, 3f32.sqrt(), rng),
            bias: Param::zeros(&[cout]),
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f32> {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = ho * wo;
        let mut cols = vec![0.0f32; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = ho * wo;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = dx.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let n = ho * wo;
        let cols = if self.is_pointwise() { x.data.clone() } else { self.im2col(x, ho, wo) };
        let mut y = Tensor::zeros(self.cout, ho, wo);
        for (co, b) in self.bias.value.iter().enumerate() {
            y.data[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        let kdim = self.cin * self.k * self.k;
        gemm(false, false, self.cout, n, kdim, 1.0, &self.weight.value, &cols, 1.0, &mut y.data);
        (y, ConvCache { cols, in_shape: x.shape() })
    }

    /// Forward pass that drops the unfolded input.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor) -> Tensor {
        let (_, h, w) = cache.in_shape;
        let (ho, wo) = (dy.h, dy.w);
        let n = ho * wo;
        let kdim = self.cin * self.k * self.k;
        for co in 0..self.cout {
            self.bias.grad[co] += dy.data[co * n..(co + 1) * n].iter().sum::<f32>();
        }
        gemm(false, true, self.cout, kdim, n, 1.0, &dy.data, &cache.cols, 1.0, &mut self.weight.grad);
        let mut dcols = vec![0.0f32; kdim * n];
        gemm(true, false, kdim, n, self.cout, 1.0, &self.weight.value, &dy.data, 0.0, &mut dcols);
        if self.is_pointwise() {
            Tensor::from_vec(self.cin, h, w, dcols)
        } else {
            self.col2im(&dcols, h, w, ho, wo)
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
