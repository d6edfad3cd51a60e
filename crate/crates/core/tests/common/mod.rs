#![allow(dead_code)]

use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srcverify::evaluation::ScoredTrial;
use srcverify::features::{LcnnConfig, LcnnNet};
use srcverify::nn::{log_softmax_rows, nll_grad_from_log_probs, nll_loss, Linear, Mode, Module, Param};
use srcverify::similarity::{HeadConfig, SimilarityHead};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A head with random weights and non-trivial running statistics.
pub fn random_head(l: usize, m: usize, seed: u64) -> SimilarityHead {
    let mut r = rng(seed);
    let cfg = HeadConfig {
        embedding_dim: l,
        projection_dim: m,
        ..HeadConfig::default()
    };
    let mut head = SimilarityHead::new(cfg, &mut r).unwrap();
    for v in head.norm.running_mean.iter_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    for v in head.norm.running_var.iter_mut() {
        *v = r.random_range(0.2..2.0);
    }
    for v in head.norm.gamma.value.iter_mut() {
        *v = r.random_range(0.5..1.5);
    }
    for v in head.norm.beta.value.iter_mut() {
        *v = r.random_range(-0.3..0.3);
    }
    head
}

fn at2(a: &ArrayD<f64>, i: usize, j: usize) -> f64 {
    a[[i, j]]
}

fn at1(a: &ArrayD<f64>, i: usize) -> f64 {
    a[[i]]
}

/// Inference-mode head output computed one scalar at a time.
pub fn scalar_head_oracle(head: &SimilarityHead, e_a: &[f64], e_b: &[f64]) -> [f64; 2] {
    let l = e_a.len();
    let m = head.cfg.projection_dim;
    let project = |e: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; m];
        for i in 0..m {
            let mut acc = at1(&head.fc1.bias.value, i);
            for j in 0..l {
                acc += at2(&head.fc1.weight.value, i, j) * e[j];
            }
            h[i] = acc;
        }
        h
    };
    let h_a = project(e_a);
    let h_b = project(e_b);
    let mut concat = Vec::new();
    for i in 0..m {
        concat.push(h_a[i]);
    }
    for i in 0..m {
        concat.push(h_b[i]);
    }
    for i in 0..m {
        concat.push(h_a[i] * h_b[i]);
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut z = at1(&head.fc2.bias.value, i);
        for j in 0..3 * m {
            z += at2(&head.fc2.weight.value, i, j) * concat[j];
        }
        let mean = head.norm.running_mean[[i]];
        let var = head.norm.running_var[[i]];
        let normed = (z - mean) / (var + head.norm.eps).sqrt() * at1(&head.norm.gamma.value, i)
            + at1(&head.norm.beta.value, i);
        out[i] = if normed > 0.0 {
            normed
        } else {
            head.cfg.leaky_slope * normed
        };
    }
    let mut logits = [0.0; 2];
    for (c, logit) in logits.iter_mut().enumerate() {
        let mut acc = at1(&head.fc3.bias.value, c);
        for j in 0..m {
            acc += at2(&head.fc3.weight.value, c, j) * out[j];
        }
        *logit = acc;
    }
    let mx = logits[0].max(logits[1]);
    let lse = mx + ((logits[0] - mx).exp() + (logits[1] - mx).exp()).ln();
    [logits[0] - lse, logits[1] - lse]
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between accumulated gradients of `module` and central finite
/// differences of `loss` (step `h`) over every parameter element.
pub fn worst_gradient_error<M: Module + Clone>(
    module: &M,
    loss: impl Fn(&M) -> f64,
    analytic: impl Fn(&mut M),
    h: f64,
    floor: f64,
) -> (f64, String) {
    let mut with_grads = module.clone();
    with_grads.zero_grad();
    analytic(&mut with_grads);
    let mut grads: Vec<(String, ArrayD<f64>)> = Vec::new();
    with_grads.visit_params("", &mut |name, p: &mut Param| grads.push((name.to_string(), p.grad.clone())));

    let mut worst = (0.0, String::new());
    for (name, grad) in &grads {
        for flat in 0..grad.len() {
            let shifted = |delta: f64| {
                let mut m = module.clone();
                m.visit_params("", &mut |n, p: &mut Param| {
                    if n == name {
                        let v = p.value.as_slice_mut().expect("contiguous parameter");
                        v[flat] += delta;
                    }
                });
                loss(&m)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = grad.as_slice().expect("contiguous gradient")[flat];
            let err = relative_error(a, numeric, floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{flat}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

/// AUC by comparing every positive with every negative (ties count one half).
pub fn auc_oracle(trials: &[ScoredTrial]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for p in trials.iter().filter(|t| t.label == 1) {
        for n in trials.iter().filter(|t| t.label == 0) {
            pairs += 1;
            if p.score > n.score {
                twice += 2;
            } else if p.score == n.score {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// EER by recounting error rates at every distinct score. Each distinct score `s_k`
/// stands for the interval `(s_{k-1}, s_k]`, represented by its midpoint; a final point
/// above every score has FPR 0 and FNR 1. The crossing of FPR - FNR through zero is
/// interpolated linearly.
pub fn eer_oracle(trials: &[ScoredTrial]) -> (f64, f64) {
    let mut scores: Vec<f64> = trials.iter().map(|t| t.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let p = trials.iter().filter(|t| t.label == 1).count() as f64;
    let n = trials.iter().filter(|t| t.label == 0).count() as f64;
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for (k, &s) in scores.iter().enumerate() {
        let fp = trials.iter().filter(|t| t.label == 0 && t.score >= s).count() as f64;
        let missed = trials.iter().filter(|t| t.label == 1 && t.score < s).count() as f64;
        let tau = if k == 0 { s } else { 0.5 * (scores[k - 1] + s) };
        pts.push((tau, fp / n, missed / p));
    }
    pts.push((*scores.last().unwrap(), 0.0, 1.0));
    for k in 1..pts.len() {
        let d_prev = pts[k - 1].1 - pts[k - 1].2;
        let d = pts[k].1 - pts[k].2;
        if d <= 0.0 {
            let t = d_prev / (d_prev - d);
            return (
                pts[k - 1].1 + t * (pts[k].1 - pts[k - 1].1),
                pts[k - 1].0 + t * (pts[k].0 - pts[k - 1].0),
            );
        }
    }
    unreachable!("the final point has FPR - FNR = -1")
}

/// Random trial set with both labels, sometimes with heavily tied scores.
pub fn random_trials(r: &mut impl Rng, max_n: usize) -> Vec<ScoredTrial> {
    let n = r.random_range(2..=max_n);
    let coarse = r.random_bool(0.5);
    let mut trials: Vec<ScoredTrial> = (0..n)
        .map(|_| {
            let label = u8::from(r.random_bool(0.5));
            let score = if coarse {
                r.random_range(0..5) as f64 / 4.0
            } else {
                r.random::<f64>()
            };
            ScoredTrial::new(score, label)
        })
        .collect();
    trials[0].label = 1;
    trials[1].label = 0;
    trials
}

/// Gaussian smoothing computed on an explicitly padded copy of the sequence. The padding
/// is built by tiling mirrored copies outwards until the kernel radius is covered.
pub fn smooth_oracle(seq: &[f64], sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * r)
        .map(|j| {
            let d = j as f64 - r as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut left: Vec<f64> = Vec::new();
    let mut flip = true;
    while left.len() < r {
        let tile: Vec<f64> = if flip { seq.iter().rev().copied().collect() } else { seq.to_vec() };
        let mut next = tile;
        next.extend(left);
        left = next;
        flip = !flip;
    }
    let mut right: Vec<f64> = Vec::new();
    let mut flip = true;
    while right.len() < r {
        if flip {
            right.extend(seq.iter().rev());
        } else {
            right.extend(seq.iter());
        }
        flip = !flip;
    }
    let mut padded: Vec<f64> = left[left.len() - r..].to_vec();
    padded.extend_from_slice(seq);
    padded.extend_from_slice(&right[..r]);
    (0..seq.len())
        .map(|i| (0..=2 * r).map(|j| kernel[j] * padded[i + j]).sum())
        .collect()
}

/// Minima by brute force: flat runs of the negated sequence that are strictly higher
/// than both neighbours (not touching either end) are peaks at the run's middle. For
/// each peak, the widest subrange in which it is the highest value gives the
/// prominence, and the widest subrange staying strictly above half-prominence gives
/// the width.
pub fn minima_oracle(seq: &[f64], min_depth: f64, min_width: usize) -> Vec<(usize, f64, usize)> {
    let y: Vec<f64> = seq.iter().map(|v| -v).collect();
    let n = y.len();
    let mut out = Vec::new();
    let mut l = 0;
    while l < n {
        let mut r = l;
        while r + 1 < n && y[r + 1] == y[l] {
            r += 1;
        }
        if l >= 1 && r + 1 < n && y[l - 1] < y[l] && y[r + 1] < y[r] {
            let p = (l + r) / 2;
            let h = y[p];
            let mut best = (p, p);
            for a in 0..=p {
                for b in p..n {
                    if y[a..=b].iter().all(|&v| v <= h) && b - a > best.1 - best.0 {
                        best = (a, b);
                    }
                }
            }
            let left_min = y[best.0..=p].iter().copied().fold(f64::INFINITY, f64::min);
            let right_min = y[p..=best.1].iter().copied().fold(f64::INFINITY, f64::min);
            let depth = h - left_min.max(right_min);
            let line = h - depth / 2.0;
            let mut width = 1;
            for a in 0..=p {
                for b in p..n {
                    if y[a..=b].iter().all(|&v| v > line) {
                        width = width.max(b - a + 1);
                    }
                }
            }
            if depth >= min_depth && width >= min_width {
                out.push((p, depth, width));
            }
        }
        l = r + 1;
    }
    out
}

/// Random sequence for the minima oracle: continuous values or a coarse grid with many
/// ties and flat runs.
pub fn random_sequence(r: &mut impl Rng, max_len: usize) -> Vec<f64> {
    let n = r.random_range(1..=max_len);
    if r.random_bool(0.5) {
        (0..n).map(|_| r.random::<f64>()).collect()
    } else {
        (0..n).map(|_| r.random_range(0..6) as f64 / 5.0).collect()
    }
}

/// Window pairs by stepping through the track until window B no longer fits.
pub fn window_count_oracle(n_samples: usize, window: usize, stride: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + 2 * window <= n_samples {
        count += 1;
        start += stride;
    }
    count
}

/// Mini backbone plus class head, as one module for gradient checking.
#[derive(Clone)]
pub struct Classifier {
    pub net: LcnnNet,
    pub head: Linear,
}

impl Module for Classifier {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params(&format!("{prefix}net"), f);
        self.head.visit_params(&format!("{prefix}head"), f);
    }
}

/// Worst relative gradient error of cross-entropy through a small LCNN on a 3x1x8x16 batch.
pub fn backbone_gradient_error(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let cfg = LcnnConfig {
        channels: [4, 4, 4],
        kernel: 3,
        embedding_dim: 6,
    };
    let mut net = LcnnNet::new(cfg, 8, &mut r).unwrap();
    let x = Array4::from_shape_simple_fn((3, 1, 8, 16), || r.random_range(-1.0..1.0));
    // A few training-mode passes give the fixed statistics non-trivial values.
    for _ in 0..3 {
        net.forward_train(&x, Mode::Train).unwrap();
    }
    let head = Linear::new(6, 3, &mut r);
    let targets = [0, 2, 1];
    worst_gradient_error(
        &Classifier { net, head },
        |c| {
            let emb = c.net.forward_eval(&x).unwrap();
            nll_loss(&log_softmax_rows(&c.head.forward(&emb)), &targets)
        },
        |c| {
            let (emb, tape) = c.net.forward_train(&x, Mode::Eval).unwrap();
            let lp = log_softmax_rows(&c.head.forward(&emb));
            let d_emb = c.head.backward(&emb, &nll_grad_from_log_probs(&lp, &targets));
            c.net.backward(&tape, &d_emb);
        },
        1e-4,
        1e-8,
    )
}

/// Worst relative gradient error of the pair NLL over all head parameters, with dropout
/// off and fixed normalization statistics.
pub fn head_gradient_error(seed: u64) -> (f64, String) {
    let head = random_head(5, 3, seed);
    let mut r = rng(seed + 1000);
    let e_a = random_matrix(6, 5, &mut r);
    let e_b = random_matrix(6, 5, &mut r);
    let labels = [0, 1, 1, 0, 1, 0];
    worst_gradient_error(
        &head,
        |h| nll_loss(&h.log_probs_eval(&e_a, &e_b).unwrap(), &labels),
        |h| {
            let (lp, tape) = h.forward_train(&e_a, &e_b, Mode::Eval, &mut rng(0)).unwrap();
            h.backward(&tape, &nll_grad_from_log_probs(&lp, &labels));
        },
        1e-4,
        1e-8,
    )
}
