use crate::param::Module;

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step and matched to parameters by visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let first = self.m.is_empty();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut("", &mut |_, p| {
            if first {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter layout");
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
                p.grad[i] = 0.0;
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Module, Param};

    struct Quad(Param);
    impl Module for Quad {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param)) {
            f("x", &self.0)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("x", &mut self.0)
        }
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut q = Quad(Param::filled(&[2], 3.0));
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let x = q.0.value.clone();
            q.0.grad = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut q);
        }
        assert!(q.0.value.iter().all(|v| v.abs() < 1e-2), "{:?}", q.0.value);
        assert!(q.0.grad.iter().all(|g| *g == 0.0));
    }
}
