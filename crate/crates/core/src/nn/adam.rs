use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use super::Module;

/// Adam with PyTorch defaults (betas 0.9/0.999, eps 1e-8, no weight decay). Moment
/// buffers are keyed by parameter name, so several modules can share one optimizer
/// as long as they are stepped under distinct prefixes.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every module from its accumulated gradients.
    pub fn step(&mut self, modules: &mut [(&str, &mut dyn Module)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (prefix, module) in modules.iter_mut() {
            module.visit_params(prefix, &mut |name, p| {
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
                Zip::from(&mut p.value)
                    .and(&p.grad)
                    .and(m)
                    .and(v)
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};

    struct Quadratic {
        x: Param,
    }

    impl Module for Quadratic {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "x"), &mut self.x);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut q = Quadratic {
            x: Param::new(ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0)),
        };
        q.x.grad[[0]] = 3.0;
        q.x.grad[[1]] = -0.5;
        let mut opt = Adam::new(0.1);
        opt.step(&mut [("q", &mut q)]);
        assert!((q.x.value[[0]] - 0.9).abs() < 1e-6);
        assert!((q.x.value[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic {
            x: Param::new(ArrayD::from_elem(ndarray::IxDyn(&[1]), 5.0)),
        };
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            q.zero_grad();
            q.x.grad[[0]] = 2.0 * (q.x.value[[0]] - 2.0);
            opt.step(&mut [("q", &mut q)]);
        }
        assert!((q.x.value[[0]] - 2.0).abs() < 1e-2);
    }
}
