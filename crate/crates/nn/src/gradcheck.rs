//! Finite-difference checks for hand-written backward passes, using a
//! fourth-order central stencil so f32 forward passes can be checked at
//! steps large enough to stay clear of round-off.

use crate::param::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    /// `‖g_analytic − g_fd‖ / max(‖g_fd‖, ‖g_analytic‖)` over the checked entries.
    pub rel_err: f64,
    pub fd_norm: f64,
    pub analytic_norm: f64,
    /// `‖g_analytic − g_fd‖` over the checked entries.
    pub diff_norm: f64,
}

/// `(relative error, ‖b‖, ‖a‖, ‖a − b‖)`.
fn rel(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    (if denom == 0.0 { 0.0 } else { diff / denom }, nb, na, diff)
}

/// Fourth-order central difference from `f(x±h)` and `f(x±2h)`.
fn five_point(p1: f64, m1: f64, p2: f64, m2: f64, h: f32) -> f64 {
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h as f64)
}

fn pick(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    // deterministic spread over the whole parameter
    (0..count).map(|i| (i * len) / count + (i * 7919) % (len / count).max(1)).map(|i| i.min(len - 1)).collect()
}

/// Compares analytic parameter gradients with central differences.
///
/// `backprop` must zero the gradients and accumulate fresh ones for the
/// same loss that `loss` evaluates.
pub fn check_params<M: Module>(
    model: &mut M,
    step: f32,
    per_param: usize,
    loss: &dyn Fn(&M) -> f64,
    backprop: &dyn Fn(&mut M),
) -> Vec<GradReport> {
    backprop(model);
    let mut analytic: Vec<(String, Vec<f32>)> = Vec::new();
    model.visit("", &mut |name, p| analytic.push((name.to_string(), p.grad.clone())));
    let mut reports = Vec::new();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let idx = pick(grad.len(), per_param);
        let mut fd = Vec::with_capacity(idx.len());
        let mut an = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = nudge(model, pi, i, None);
            let mut at = |k: f32| {
                nudge(model, pi, i, Some(orig + k * step));
                loss(model)
            };
            let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
            nudge(model, pi, i, Some(orig));
            fd.push(five_point(p1, m1, p2, m2, step));
            an.push(grad[i] as f64);
        }
        let (rel_err, fd_norm, analytic_norm, diff_norm) = rel(&an, &fd);
        reports.push(GradReport { name: name.clone(), checked: idx.len(), rel_err, fd_norm, analytic_norm, diff_norm });
    }
    reports
}

/// Sets (or just reads) entry `i` of parameter number `pi`; returns the old value.
fn nudge<M: Module>(model: &mut M, pi: usize, i: usize, value: Option<f32>) -> f32 {
    let mut k = 0;
    let mut old = 0.0;
    model.visit_mut("", &mut |_, p| {
        if k == pi {
            old = p.value[i];
            if let Some(v) = value {
                p.value[i] = v;
            }
        }
        k += 1;
    });
    old
}

/// Compares an analytic input gradient with central differences on a
/// subset of entries.
pub fn check_input(x: &Tensor, analytic: &Tensor, step: f32, count: usize, loss: &dyn Fn(&Tensor) -> f64) -> f64 {
    let idx = pick(x.len(), count);
    let mut fd = Vec::new();
    let mut an = Vec::new();
    let mut xp = x.clone();
    for &i in &idx {
        let orig = xp.data[i];
        let mut at = |k: f32| {
            xp.data[i] = orig + k * step;
            loss(&xp)
        };
        let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
        xp.data[i] = orig;
        fd.push(five_point(p1, m1, p2, m2, step));
        an.push(analytic.data[i] as f64);
    }
    rel(&an, &fd).0
}

/// Fixed pseudo-random weights for a linear probe loss `Σ r_i y_i`.
pub fn probe_weights(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64 * 2.0 - 1.0) as f32
        })
        .collect()
}

pub fn probe_loss(y: &Tensor, r: &[f32]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}
