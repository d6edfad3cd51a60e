use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;

use super::{join, Module, Param};

/// `y = x W^T + b` over row-major batches `[N, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// PyTorch-style default init: weights and bias uniform in `±1/sqrt(in)`.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::uniform(&[output, input], bound, rng),
            bias: Param::uniform(&[output], bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &b;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dw = dy.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        dy.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Which half won the max, per output element.
#[derive(Debug, Clone)]
pub struct MfmCache {
    first_wins: Vec<bool>,
    input_shape: Vec<usize>,
}

/// Max-Feature-Map: splits axis 1 into two halves and takes the element-wise max.
pub fn mfm(x: &ArrayD<f64>) -> (ArrayD<f64>, MfmCache) {
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    assert!(c % 2 == 0, "MFM needs an even channel count, got {c}");
    let half = c / 2;
    let s: usize = shape[2..].iter().product();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * half * s);
    let mut first_wins = Vec::with_capacity(n * half * s);
    for i in 0..n {
        for ch in 0..half {
            let a = &xs[(i * c + ch) * s..(i * c + ch + 1) * s];
            let b = &xs[(i * c + ch + half) * s..(i * c + ch + half + 1) * s];
            for (&p, &q) in a.iter().zip(b) {
                let first = p >= q;
                first_wins.push(first);
                out.push(if first { p } else { q });
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape[1] = half;
    (
        ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("shape"),
        MfmCache {
            first_wins,
            input_shape: shape,
        },
    )
}

pub fn mfm_backward(cache: &MfmCache, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let shape = &cache.input_shape;
    let (n, c) = (shape[0], shape[1]);
    let half = c / 2;
    let s: usize = shape[2..].iter().product();
    let dy = dy.as_standard_layout();
    let ds = dy.as_slice().expect("standard layout");
    let mut dx = vec![0.0; n * c * s];
    let mut k = 0;
    for i in 0..n {
        for ch in 0..half {
            for j in 0..s {
                let target = if cache.first_wins[k] { ch } else { ch + half };
                dx[(i * c + target) * s + j] = ds[k];
                k += 1;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), dx).expect("shape")
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array2<f64>, dy: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(x)
        .for_each(|g, &v| {
            if v <= 0.0 {
                *g *= slope;
            }
        });
    dx
}

/// Inverted dropout. Returns the output and the scaling mask (0 or `1/(1-p)`).
pub fn dropout(x: &Array2<f64>, rate: f64, rng: &mut impl Rng) -> (Array2<f64>, Array2<f64>) {
    if rate <= 0.0 {
        return (x.clone(), Array2::ones(x.raw_dim()));
    }
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    (x * &mask, mask)
}

pub fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
pub fn nll_loss(log_probs: &Array2<f64>, targets: &[usize]) -> f64 {
    assert_eq!(log_probs.nrows(), targets.len());
    -targets
        .iter()
        .enumerate()
        .map(|(i, &t)| log_probs[[i, t]])
        .sum::<f64>()
        / targets.len() as f64
}

/// Gradient of [`nll_loss`] w.r.t. the logits that produced `log_probs` via log-softmax.
pub fn nll_grad_from_log_probs(log_probs: &Array2<f64>, targets: &[usize]) -> Array2<f64> {
    let n = targets.len() as f64;
    let mut g = log_probs.mapv(f64::exp);
    for (i, &t) in targets.iter().enumerate() {
        g[[i, t]] -= 1.0;
    }
    g / n
}
