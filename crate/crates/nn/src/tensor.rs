use std::ops::{Index, IndexMut};

/// A single feature map stored channel-major (`c × h × w`).
///
/// Vectors are represented as `c × 1 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length does not match shape");
        Self { c, h, w, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let c = data.len();
        Self { c, h: 1, w: 1, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut c = 0;
        for p in parts {
            assert_eq!((p.h, p.w), (h, w), "channel concat needs equal spatial size");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Tensor { c, h, w, data }
    }

    /// Splits along channels into chunks of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        assert_eq!(sizes.iter().sum::<usize>(), self.c);
        let p = self.plane();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(Tensor::from_vec(s, self.h, self.w, self.data[start * p..(start + s) * p].to_vec()));
            start += s;
        }
        out
    }

    /// Places `a` left of `b` along the width axis.
    pub fn concat_width(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.c, a.h), (b.c, b.h), "width concat needs equal channels and height");
        let w = a.w + b.w;
        let mut out = Tensor::zeros(a.c, a.h, w);
        for c in 0..a.c {
            for y in 0..a.h {
                let dst = (c * a.h + y) * w;
                out.data[dst..dst + a.w].copy_from_slice(&a.data[(c * a.h + y) * a.w..][..a.w]);
                out.data[dst + a.w..dst + w].copy_from_slice(&b.data[(c * b.h + y) * b.w..][..b.w]);
            }
        }
        out
    }

    /// Returns columns `[x0, x0 + width)`.
    pub fn slice_width(&self, x0: usize, width: usize) -> Tensor {
        assert!(x0 + width <= self.w);
        let mut out = Tensor::zeros(self.c, self.h, width);
        for c in 0..self.c {
            for y in 0..self.h {
                let src = (c * self.h + y) * self.w + x0;
                let dst = (c * self.h + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Tensor {
        let (h2, w2) = (self.h * 2, self.w * 2);
        let mut out = Tensor::zeros(self.c, h2, w2);
        for c in 0..self.c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out.data[(c * h2 + y) * w2 + x] = self.data[(c * self.h + y / 2) * self.w + x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample2`]: sums each 2×2 block.
    pub fn upsample2_backward(&self) -> Tensor {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.data[(c * h + y / 2) * w + x / 2] += self.data[(c * self.h + y) * self.w + x];
                }
            }
        }
        out
    }

    /// Folds `f × f` spatial blocks into channels. Channel order is
    /// `(c, dy, dx)` with `c` slowest.
    pub fn space_to_depth(&self, f: usize) -> Tensor {
        assert!(self.h % f == 0 && self.w % f == 0, "space_to_depth: {}x{} not divisible by {f}", self.h, self.w);
        let (h, w) = (self.h / f, self.w / f);
        let mut out = Tensor::zeros(self.c * f * f, h, w);
        for c in 0..self.c {
            for dy in 0..f {
                for dx in 0..f {
                    let oc = (c * f + dy) * f + dx;
                    for y in 0..h {
                        for x in 0..w {
                            out.data[(oc * h + y) * w + x] =
                                self.data[(c * self.h + y * f + dy) * self.w + x * f + dx];
                        }
                    }
                }
            }
        }
        out
    }

    /// Exact inverse of [`Tensor::space_to_depth`].
    pub fn depth_to_space(&self, f: usize) -> Tensor {
        assert!(self.c % (f * f) == 0, "depth_to_space: {} channels not divisible by {}", self.c, f * f);
        let c_out = self.c / (f * f);
        let (h, w) = (self.h * f, self.w * f);
        let mut out = Tensor::zeros(c_out, h, w);
        for c in 0..c_out {
            for dy in 0..f {
                for dx in 0..f {
                    let ic = (c * f + dy) * f + dx;
                    for y in 0..self.h {
                        for x in 0..self.w {
                            out.data[(c * h + y * f + dy) * w + x * f + dx] =
                                self.data[(ic * self.h + y) * self.w + x];
                        }
                    }
                }
            }
        }
        out
    }
}

impl Index<(usize, usize, usize)> for Tensor {
    type Output = f32;
    fn index(&self, (c, y, x): (usize, usize, usize)) -> &f32 {
        &self.data[(c * self.h + y) * self.w + x]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor {
    fn index_mut(&mut self, (c, y, x): (usize, usize, usize)) -> &mut f32 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }
}
