use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, Axis, Ix2, Ix4};
use rand::Rng;

use super::{join, Module, Param};

/// Square-kernel 2-d convolution, stride 1, zero "same" padding (odd kernels only).
/// Implemented as im2col followed by a matrix product per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    kernel: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            bias: Param::uniform(&[out_ch], bound, rng),
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (o, i, k) = (self.out_channels(), self.in_channels(), self.kernel);
        self.weight
            .value
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous conv weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    /// `x: [N, C, H, W] -> [N, O, H, W]`
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let o = self.out_channels();
        let wm = self.weight_matrix();
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let mut out = Array4::<f64>::zeros((n, o, h, w));
        let mut col = Array2::<f64>::zeros((c * self.kernel * self.kernel, h * w));
        for (sample, mut out_n) in x.outer_iter().zip(out.outer_iter_mut()) {
            im2col(sample, self.kernel, &mut col);
            let mut y = out_n
                .view_mut()
                .into_shape_with_order((o, h * w))
                .expect("contiguous output");
            for (mut row, b) in y.outer_iter_mut().zip(bias) {
                row.fill(*b);
            }
            general_mat_mul(1.0, &wm, &col, 1.0, &mut y);
        }
        out
    }

    /// Accumulates weight/bias gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward(
        &mut self,
        x: &Array4<f64>,
        dy: &Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        let o = self.out_channels();
        let k = self.kernel;
        let mut dw = Array2::<f64>::zeros((o, c * k * k));
        let mut col = Array2::<f64>::zeros((c * k * k, h * w));
        let mut dcol = Array2::<f64>::zeros((c * k * k, h * w));
        let mut dx = need_input_grad.then(|| Array4::<f64>::zeros((n, c, h, w)));
        let wm = self.weight_matrix().to_owned();
        let mut db = vec![0.0; o];
        for i in 0..n {
            let sample = x.index_axis(Axis(0), i);
            let dy_n = dy.index_axis(Axis(0), i);
            let dy_n = dy_n
                .into_shape_with_order((o, h * w))
                .expect("contiguous grad");
            for (acc, row) in db.iter_mut().zip(dy_n.outer_iter()) {
                *acc += row.sum();
            }
            im2col(sample, k, &mut col);
            general_mat_mul(1.0, &dy_n, &col.t(), 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(1.0, &wm.t(), &dy_n, 0.0, &mut dcol);
                col2im_add(&dcol, k, dx.index_axis_mut(Axis(0), i));
            }
        }
        let dw = dw
            .into_shape_with_order((o, c, k, k))
            .expect("reshape")
            .into_dimensionality::<Ix4>()
            .expect("4-d");
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &ndarray::Array1::from(db).into_dyn();
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `col[(c*k + ky)*k + kx, y*W + x] = x[c, y + ky - p, x + kx - p]` (0 outside).
fn im2col(x: ArrayView3<'_, f64>, k: usize, col: &mut Array2<f64>) {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    col.fill(0.0);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cols = col.as_slice_mut().expect("contiguous col");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst_row = &mut cols[row * h * w..(row + 1) * h * w];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize) - dx).min(w as isize).max(0) as usize;
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = &xs[(ch * h + sy as usize) * w..(ch * h + sy as usize + 1) * w];
                    let dst = &mut dst_row[yy * w..(yy + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add(dcol: &Array2<f64>, k: usize, mut dx: ndarray::ArrayViewMut3<'_, f64>) {
    let (c, h, w) = dx.dim();
    let pad = (k / 2) as isize;
    let dcs = dcol.as_slice().expect("contiguous");
    let dxs = dx.as_slice_mut().expect("contiguous dx");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src_row = &dcs[row * h * w..(row + 1) * h * w];
                let dxo = kx as isize - pad;
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = ((w as isize) - dxo).min(w as isize).max(0) as usize;
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let dst = &mut dxs[(ch * h + sy as usize) * w..(ch * h + sy as usize + 1) * w];
                    let src = &src_row[yy * w..(yy + 1) * w];
                    let d0 = (x_lo as isize + dxo) as usize;
                    for (d, s) in dst[d0..d0 + (x_hi - x_lo)].iter_mut().zip(&src[x_lo..x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Argmax position (0..4 inside each 2x2 window) for every pooled output.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<u8>,
    input_dim: (usize, usize, usize, usize),
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let mut argmax = vec![0u8; n * c * oh * ow];
    {
        let os = out.as_slice_mut().expect("contiguous");
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i00 = base + 2 * y * w + 2 * xx;
                    let cands = [xs[i00], xs[i00 + 1], xs[i00 + w], xs[i00 + w + 1]];
                    let mut best = 0;
                    for (j, v) in cands.iter().enumerate().skip(1) {
                        if *v > cands[best] {
                            best = j;
                        }
                    }
                    let o = (plane * oh + y) * ow + xx;
                    os[o] = cands[best];
                    argmax[o] = best as u8;
                }
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            input_dim: (n, c, h, w),
        },
    )
}

pub fn max_pool2_backward(cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = cache.input_dim;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("contiguous");
    let dxs = dx.as_slice_mut().expect("contiguous");
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let o = (plane * oh + y) * ow + xx;
                let a = cache.argmax[o] as usize;
                let idx = base + (2 * y + a / 2) * w + 2 * xx + a % 2;
                dxs[idx] += dys[o];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let o = conv.out_channels();
        let k = conv.kernel as isize;
        let p = k / 2;
        let wt = &conv.weight.value;
        let mut out = Array4::zeros((n, o, h, w));
        for s in 0..n {
            for oc in 0..o {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.value[[oc]];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - p, xx + kx - p);
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                        acc += wt[[oc, ic, ky as usize, kx as usize]]
                                            * x[[s, ic, sy as usize, sx as usize]];
                                    }
                                }
                            }
                        }
                        out[[s, oc, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 4, 3, &mut rng);
        let x = Array4::from_shape_simple_fn((2, 3, 5, 7), || rng.random_range(-1.0..1.0));
        let fast = conv.forward(&x);
        let slow = naive_conv(&conv, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_adjoint() {
        // <conv(x) - b, dy> = <x, conv^T(dy)> for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, &mut rng);
        let x = Array4::from_shape_simple_fn((1, 2, 4, 6), || rng.random_range(-1.0..1.0));
        let dy = Array4::from_shape_simple_fn((1, 3, 4, 6), || rng.random_range(-1.0..1.0));
        let y = conv.forward(&x);
        let b = conv.bias.value.clone();
        let mut lhs = 0.0;
        for ((idx, v), g) in y.indexed_iter().zip(dy.iter()) {
            lhs += (v - b[[idx.1]]) * g;
        }
        let dx = conv.backward(&x, &dy, true).unwrap();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_picks_window_max() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1., 5., 2., 0., 3., 4., 7., 1.]).unwrap();
        let (y, cache) = max_pool2(&x);
        assert_eq!(y.as_slice().unwrap(), &[5.0, 7.0]);
        let dx = max_pool2_backward(&cache, &Array4::from_elem((1, 1, 1, 2), 1.0));
        assert_eq!(dx.as_slice().unwrap(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
    }
}
