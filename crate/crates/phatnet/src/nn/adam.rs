//! Adam optimizer over a flat parameter store.

use super::{Grads, ParamStore, Scalar};

/// Adam with bias correction. Moment buffers are part of the trainable
/// state and serialize with checkpoints so resumed runs replay exactly.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken so far (bias correction uses `t = steps + 1`).
    pub steps: u64,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
        }
    }

    /// Apply one update with the given learning rate.
    pub fn step(&mut self, lr: f64, params: &mut ParamStore<F>, grads: &Grads<F>) {
        let t = (self.steps + 1) as f64;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_b1 = F::from_f64(1.0 - self.beta1);
        let one_b2 = F::from_f64(1.0 - self.beta2);
        // Fold the bias corrections into the step size.
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        let alpha = F::from_f64(lr / corr1);
        let corr2_sqrt = F::from_f64(corr2.sqrt());
        let eps = F::from_f64(self.eps);

        let p = params.data_mut();
        let g = grads.data();
        assert_eq!(p.len(), g.len(), "param/grad length mismatch");
        assert_eq!(p.len(), self.m.len(), "optimizer state length mismatch");
        for i in 0..p.len() {
            let gi = g[i];
            self.m[i] = self.m[i] * b1 + gi * one_b1;
            self.v[i] = self.v[i] * b2 + gi * gi * one_b2;
            let denom = (self.v[i].sqrt() / corr2_sqrt) + eps;
            p[i] = p[i] - alpha * self.m[i] / denom;
        }
        self.steps += 1;
    }

    pub fn first_moment(&self) -> &[F] {
        &self.m
    }

    pub fn second_moment(&self) -> &[F] {
        &self.v
    }

    /// Restore optimizer state captured by a checkpoint.
    pub fn restore(&mut self, steps: u64, m: Vec<F>, v: Vec<F>) {
        assert_eq!(m.len(), self.m.len(), "first-moment length mismatch");
        assert_eq!(v.len(), self.v.len(), "second-moment length mismatch");
        self.steps = steps;
        self.m = m;
        self.v = v;
    }
}
