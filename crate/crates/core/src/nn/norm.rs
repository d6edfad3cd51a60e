use ndarray::{ArrayD, IxDyn};

use super::{join, Mode, Module, Param};

/// Batch normalization over axis 1 of `[N, C, ...]` inputs. Statistics are taken over
/// every other axis. Running statistics follow PyTorch (momentum 0.1, unbiased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized input, standard layout `[N, C, S]` flattened.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    mode: Mode,
}

/// `(N, C, S)` of a `[N, C, ...]` shape.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    (n, c, shape[2..].iter().product())
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Inference path: running statistics, no mutation.
    pub fn forward_eval(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        self.forward_with(x, Mode::Eval).0
    }

    fn forward_with(&self, x: &ArrayD<f64>, mode: Mode) -> (ArrayD<f64>, BnCache, Vec<f64>, Vec<f64>) {
        let shape = x.shape().to_vec();
        let (n, c, s) = ncs(&shape);
        assert_eq!(c, self.channels(), "batch-norm channel count");
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (mean, var) = match mode {
            Mode::Train => {
                let m = (n * s) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += xs[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                    }
                    mean[ch] = acc / m;
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += xs[(i * c + ch) * s..(i * c + ch + 1) * s]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                    var[ch] = acc / m;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.iter().copied().collect(),
                self.running_var.iter().copied().collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * s..(i * c + ch + 1) * s;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
                for ((h, o), v) in xhat[range.clone()]
                    .iter_mut()
                    .zip(&mut y[range.clone()])
                    .zip(&xs[range])
                {
                    *h = (v - m) * is;
                    *o = g * *h + b;
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("shape");
        (
            y,
            BnCache {
                xhat,
                inv_std,
                shape,
                mode,
            },
            mean,
            var,
        )
    }

    /// Training-capable forward. In train mode the running statistics are updated.
    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode) -> (ArrayD<f64>, BnCache) {
        let (y, cache, mean, var) = self.forward_with(x, mode);
        if mode == Mode::Train {
            let m = (x.len() / self.channels()) as f64;
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = self.momentum;
            for ch in 0..self.channels() {
                self.running_mean[[ch]] = (1.0 - mom) * self.running_mean[[ch]] + mom * mean[ch];
                self.running_var[[ch]] =
                    (1.0 - mom) * self.running_var[[ch]] + mom * var[ch] * correction;
            }
        }
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &ArrayD<f64>) -> ArrayD<f64> {
        let (n, c, s) = ncs(&cache.shape);
        let m = (n * s) as f64;
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().expect("standard layout");
        let xh = &cache.xhat;
        let mut dx = vec![0.0; ds.len()];
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for (d, h) in ds[r.clone()].iter().zip(&xh[r]) {
                    sum_dy += d;
                    sum_dy_xhat += d * h;
                }
            }
            self.gamma.grad[[ch]] += sum_dy_xhat;
            self.beta.grad[[ch]] += sum_dy;
            let gamma = self.gamma.value[[ch]];
            let is = cache.inv_std[ch];
            for i in 0..n {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                let out = &mut dx[r.clone()];
                match cache.mode {
                    Mode::Eval => {
                        for (o, d) in out.iter_mut().zip(&ds[r]) {
                            *o = d * gamma * is;
                        }
                    }
                    Mode::Train => {
                        let k = gamma * is / m;
                        for ((o, d), h) in out.iter_mut().zip(&ds[r.clone()]).zip(&xh[r]) {
                            *o = k * (m * d - sum_dy - h * sum_dy_xhat);
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&cache.shape), dx).expect("shape")
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "gamma"), &mut self.gamma.value);
        f(&join(prefix, "beta"), &mut self.beta.value);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
