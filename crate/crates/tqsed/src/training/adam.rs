//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::nn::Params;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update over every gradient present. Parameters without a
    /// gradient this step keep their value and state.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let p = params.get_mut(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(x) = (x - 3)^2, df/dx = 2(x - 3).
        let mut params = Params::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = params.get("x")[[0]];
            let mut grads = BTreeMap::new();
            grads.insert(
                "x".to_string(),
                ArrayD::from_elem(IxDyn(&[1]), 2.0 * (x - 3.0)),
            );
            opt.step(&mut params, &grads);
        }
        let x = params.get("x")[[0]];
        assert!((x - 3.0).abs() < 1e-3, "converged to {x}");
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut params = Params::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Adam::new(0.01);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 5.0));
        opt.step(&mut params, &grads);
        // Bias-corrected first step is lr * g/|g| regardless of magnitude.
        assert!((params.get("x")[[0]] - (1.0 - 0.01)).abs() < 1e-6);
    }
}
