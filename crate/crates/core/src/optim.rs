//! SGD with momentum, Adam, and the two learning-rate schedules.
//!
//! Weight decay is an L2 term added to the gradient for both optimizers.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::{GradientMap, ParamGroup, ParamStore};
use crate::tensor::Scalar;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `step == total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(total > 0, "cosine_lr: total must be positive");
    assert!(step <= total, "cosine_lr: step {step} beyond total {total}");
    if step == 0 {
        return lr_max;
    }
    if step == total {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// `init_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, init_lr: f64, power: f64) -> f64 {
    assert!(max_iter > 0, "poly_lr: max_iter must be positive");
    assert!(iter <= max_iter, "poly_lr: iter {iter} beyond max_iter {max_iter}");
    init_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// One momentum-SGD update of a single buffer.
///
/// `v ← momentum·v + (grad + wd·p)`, `p ← p − lr·v`.
pub fn sgd_update<T: Scalar>(p: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    assert!(
        p.len() == grad.len() && p.len() == velocity.len(),
        "sgd: parameter/gradient/momentum length mismatch"
    );
    let (lr, mu, wd) = (T::c(lr), T::c(momentum), T::c(weight_decay));
    for ((p, &g), v) in p.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Momentum SGD with a cosine-annealed learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdHyper {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 0.0003,
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_update<T: Scalar>(p: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], h: &AdamHyper, t: u64) {
    assert!(t >= 1, "adam: step counter must start at 1");
    assert!(
        p.len() == grad.len() && p.len() == m.len() && p.len() == v.len(),
        "adam: parameter/gradient/moment length mismatch"
    );
    let (b1, b2) = (h.beta1, h.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let (b1t, b2t, wd) = (T::c(b1), T::c(b2), T::c(h.weight_decay));
    let (lr, eps) = (T::c(h.lr), T::c(h.eps));
    let (c1, c2) = (T::c(c1), T::c(c2));
    for i in 0..p.len() {
        let g = grad[i] + wd * p[i];
        m[i] = b1t * m[i] + (T::one() - b1t) * g;
        v[i] = b2t * v[i] + (T::one() - b2t) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Momentum SGD over one parameter group.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub group: ParamGroup,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(group: ParamGroup, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            group,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter of `self.group` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradientMap<T>, lr: f64) {
        for (name, id, g) in grads.iter() {
            if store.param(id).group != self.group {
                continue;
            }
            assert_eq!(
                store.value(id).shape(),
                g.shape(),
                "sgd: gradient shape mismatch for {name}"
            );
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            sgd_update(store.value_mut(id).data_mut(), g.data(), v, lr, self.momentum, self.weight_decay);
        }
    }
}

/// Adam over one parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub group: ParamGroup,
    pub hyper: AdamHyper,
    t: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(group: ParamGroup, hyper: AdamHyper) -> Self {
        Adam {
            group,
            hyper,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradientMap<T>) {
        self.t += 1;
        for (name, id, g) in grads.iter() {
            if store.param(id).group != self.group {
                continue;
            }
            assert_eq!(
                store.value(id).shape(),
                g.shape(),
                "adam: gradient shape mismatch for {name}"
            );
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            adam_update(store.value_mut(id).data_mut(), g.data(), m, v, &self.hyper, self.t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_and_momentum_steps() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        // v1 = 1, v2 = 1.9
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let h = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adam_update(&mut p, &[1.0], &mut m, &mut v, &h, 1);
        assert!((p[0] - (1.0 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = [0.3f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let h = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        for t in 1..5 {
            adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, &h, t);
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    #[should_panic(expected = "start at 1")]
    fn adam_rejects_step_zero() {
        let mut p = [1.0f64];
        adam_update(&mut p, &[1.0], &mut [0.0], &mut [0.0], &AdamHyper::default(), 0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 50, 0.025, 0.001), 0.025);
        assert_eq!(cosine_lr(50, 50, 0.025, 0.001), 0.001);
        assert!((cosine_lr(5, 10, 1.0, 0.0) - 0.5).abs() < 1e-15);
        assert_eq!(poly_lr(0, 100, 0.1, 0.9), 0.1);
        assert_eq!(poly_lr(100, 100, 0.1, 0.9), 0.0);
        assert!((poly_lr(50, 100, 0.1, 1.0) - 0.05).abs() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn cosine_rejects_zero_total() {
        cosine_lr(0, 0, 1.0, 0.0);
    }
}
