use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A trainable parameter: values plus an accumulated gradient of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Uniform in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
    pub fn uniform(shape: &[usize], fan_in: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = gain / (fan_in.max(1) as f32).sqrt();
        p.value.iter_mut().for_each(|x| *x = rng.gen_range(-bound..=bound));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything owning parameters. Visit order must be stable: optimizers and
/// checkpoints rely on it.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn grad_norm(&self) -> f64 {
        let mut s = 0.0f64;
        self.visit("", &mut |_, p| s += p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>());
        s.sqrt()
    }

    /// Scales every gradient so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            self.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
        }
        norm
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
