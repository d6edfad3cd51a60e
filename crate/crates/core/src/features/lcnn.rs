//! Compact LCNN-style network over log-mel inputs.
//!
//! ```text
//! [N,1,F,T] -> BN -> 3 x (conv3x3 -> BN -> MFM -> maxpool2x2)
//!           -> mean over time -> flatten -> FC(2L) -> MFM -> embedding [N,L]
//! ```

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, max_pool2, max_pool2_backward, mfm, mfm_backward, BatchNorm, BnCache, Conv2d, Linear,
    MfmCache, Mode, Module, Param, PoolCache,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcnnConfig {
    /// Pre-MFM output channels of the three conv blocks (each even).
    pub channels: [usize; 3],
    pub kernel: usize,
    /// Embedding size L (the FC layer has 2L outputs before its MFM).
    pub embedding_dim: usize,
}

impl Default for LcnnConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            kernel: 3,
            embedding_dim: 128,
        }
    }
}

impl LcnnConfig {
    /// Smallest time axis (in frames) that survives the three pooling stages.
    pub const MIN_FRAMES: usize = 8;

    pub fn feature_dim(&self, n_mels: usize) -> usize {
        self.channels[2] / 2 * (n_mels / 8)
    }

    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.channels.iter().any(|c| *c == 0 || c % 2 != 0) {
            return Err(Error::invalid("LCNN channel counts must be positive and even"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("LCNN kernel must be odd"));
        }
        if self.embedding_dim == 0 || n_mels < 8 {
            return Err(Error::invalid("LCNN needs embedding_dim > 0 and n_mels >= 8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug)]
struct BlockTape {
    input: Array4<f64>,
    bn: BnCache,
    mfm: MfmCache,
    pool: PoolCache,
}

/// Activations kept from a training forward pass.
#[derive(Debug)]
pub struct LcnnTape {
    input_bn: BnCache,
    blocks: Vec<BlockTape>,
    pooled_dim: (usize, usize, usize, usize),
    features: Array2<f64>,
    fc_mfm: MfmCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcnnNet {
    cfg: LcnnConfig,
    n_mels: usize,
    input_bn: BatchNorm,
    blocks: Vec<ConvBlock>,
    fc: Linear,
}

impl LcnnNet {
    pub fn new(cfg: LcnnConfig, n_mels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(n_mels)?;
        let mut in_ch = 1;
        let mut blocks = Vec::new();
        for &out in &cfg.channels {
            blocks.push(ConvBlock {
                conv: Conv2d::new(in_ch, out, cfg.kernel, rng),
                bn: BatchNorm::new(out),
            });
            in_ch = out / 2;
        }
        let fc = Linear::new(cfg.feature_dim(n_mels), 2 * cfg.embedding_dim, rng);
        Ok(Self {
            cfg,
            n_mels,
            input_bn: BatchNorm::new(1),
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &LcnnConfig {
        &self.cfg
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, f, t) = x.dim();
        if c != 1 || f != self.n_mels {
            return Err(Error::Shape(format!(
                "expected [N, 1, {}, T] features, got [_, {c}, {f}, {t}]",
                self.n_mels
            )));
        }
        if t < LcnnConfig::MIN_FRAMES {
            return Err(Error::Shape(format!(
                "{t} frames is fewer than the {} the network needs",
                LcnnConfig::MIN_FRAMES
            )));
        }
        Ok(())
    }

    /// Deterministic inference (running statistics).
    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = to4(self.input_bn.forward_eval(&x.clone().into_dyn()));
        for block in &self.blocks {
            let c = block.conv.forward(&h);
            let b = block.bn.forward_eval(&c.into_dyn());
            let (m, _) = mfm(&b);
            h = max_pool2(&to4(m)).0;
        }
        let f = temporal_mean(&h);
        let (e, _) = mfm(&self.fc.forward(&f).into_dyn());
        Ok(to2(e))
    }

    /// Forward pass that records what [`LcnnNet::backward`] needs. Train mode updates
    /// normalization running statistics; eval mode uses them as fixed constants.
    pub fn forward_train(&mut self, x: &Array4<f64>, mode: Mode) -> Result<(Array2<f64>, LcnnTape)> {
        self.check_input(x)?;
        let (h0, input_bn) = self.input_bn.forward(&x.clone().into_dyn(), mode);
        let mut h = to4(h0);
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let c = block.conv.forward(&h);
            let (b, bn) = block.bn.forward(&c.into_dyn(), mode);
            let (m, mfm_cache) = mfm(&b);
            let (p, pool) = max_pool2(&to4(m));
            tapes.push(BlockTape {
                input: std::mem::replace(&mut h, p),
                bn,
                mfm: mfm_cache,
                pool,
            });
        }
        let pooled_dim = h.dim();
        let features = temporal_mean(&h);
        let (e, fc_mfm) = mfm(&self.fc.forward(&features).into_dyn());
        Ok((
            to2(e),
            LcnnTape {
                input_bn,
                blocks: tapes,
                pooled_dim,
                features,
                fc_mfm,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/d(embedding)`.
    pub fn backward(&mut self, tape: &LcnnTape, d_embedding: &Array2<f64>) {
        let d_fc = to2(mfm_backward(&tape.fc_mfm, &d_embedding.clone().into_dyn()));
        let d_features = self.fc.backward(&tape.features, &d_fc);
        let mut d = temporal_mean_backward(&d_features, tape.pooled_dim);
        for (block, bt) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            let d_m = max_pool2_backward(&bt.pool, &d);
            let d_b = mfm_backward(&bt.mfm, &d_m.into_dyn());
            let d_c = to4(block.bn.backward(&bt.bn, &d_b));
            d = block
                .conv
                .backward(&bt.input, &d_c, true)
                .expect("input gradient requested");
        }
        self.input_bn.backward(&tape.input_bn, &d.into_dyn());
    }
}

impl Module for LcnnNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.input_bn.visit_params(&join(prefix, "input_bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params(&join(prefix, &format!("block{i}.conv")), f);
            b.bn.visit_params(&join(prefix, &format!("block{i}.bn")), f);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.input_bn.visit_state(&join(prefix, "input_bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_state(&join(prefix, &format!("block{i}.conv")), f);
            b.bn.visit_state(&join(prefix, &format!("block{i}.bn")), f);
        }
        self.fc.visit_state(&join(prefix, "fc"), f);
    }
}

fn to4(a: ArrayD<f64>) -> Array4<f64> {
    a.into_dimensionality::<Ix4>().expect("4-d activation")
}

fn to2(a: ArrayD<f64>) -> Array2<f64> {
    a.into_dimensionality::<Ix2>().expect("2-d activation")
}

/// `[N, C, H, W] -> [N, C*H]`, averaging over the time axis W.
fn temporal_mean(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, _) = x.dim();
    x.mean_axis(Axis(3))
        .expect("non-empty time axis")
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h))
        .expect("flatten")
}

fn temporal_mean_backward(d: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = dim;
    let scale = 1.0 / w as f64;
    let mut out = Array4::zeros(dim);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let g = d[[i, ch * h + y]] * scale;
                out.slice_mut(ndarray::s![i, ch, y, ..]).fill(g);
            }
        }
    }
    out
}
