//! AdamW with decoupled weight decay, and the cosine learning-rate decay.

use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update of `params` in place. `step` counts from 1 and drives the
/// bias correction; `decay` toggles the weight-decay term.
pub fn adamw_step<F: Real>(
    params: &mut [F],
    grads: &[F],
    state: &mut Moments,
    step: u64,
    lr: f64,
    hp: &AdamHyper,
    decay: bool,
) {
    assert_eq!(params.len(), grads.len(), "adamw: gradient length");
    assert_eq!(params.len(), state.m.len(), "adamw: state length");
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    let shrink = if decay { 1.0 - lr * hp.weight_decay } else { 1.0 };
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
        *p = F::of(p.as_f64() * shrink - update);
    }
}

/// Optimizer state for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamHyper,
    state: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new<F: Real>(store: &ParamStore<F>, weight_decay: f64) -> Self {
        AdamW {
            hyper: AdamHyper {
                weight_decay,
                ..AdamHyper::default()
            },
            state: store.params.iter().map(|p| Moments::new(p.value.len())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is `None` for a parameter the loss
    /// does not reach; its moments still decay as with a zero gradient.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(store.params.len(), grads.len(), "adamw: one gradient slot per parameter");
        self.step += 1;
        for ((p, g), st) in store.params.iter_mut().zip(grads).zip(&mut self.state) {
            let zeros;
            let g = match g {
                Some(t) => t.data(),
                None => {
                    zeros = vec![F::zero(); p.value.len()];
                    &zeros
                }
            };
            adamw_step(p.value.data_mut(), g, st, self.step, lr, &self.hyper, p.decay);
        }
    }
}

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let f = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (PI * f).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![0.5f64, -1.0];
        let mut st = Moments::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 1, 0.1, &AdamHyper::default(), true);
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![1.0f64, 1.0];
        let mut st = Moments::new(2);
        let hp = AdamHyper::default();
        adamw_step(&mut p, &[0.5, -2.0], &mut st, 1, 0.01, &hp, true);
        let expect0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 + 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-15);
        assert!((p[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_shrinks() {
        let mut p = vec![2.0f64];
        let mut st = Moments::new(1);
        let hp = AdamHyper {
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        adamw_step(&mut p, &[0.0], &mut st, 1, 0.5, &hp, true);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        adamw_step(&mut p, &[0.0], &mut st, 2, 0.5, &hp, false);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-4), 5e-4);
        assert!(cosine_lr(100, 100, 5e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 5e-4) - 2.5e-4).abs() < 1e-18);
    }
}
