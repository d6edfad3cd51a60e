//! Shallow similarity head mapping an embedding pair to a same-source score.
//!
//! ```text
//! h_a = fc1(e_a), h_b = fc1(e_b)                 (shared weights, no activation)
//! h   = [h_a || h_b || h_a * h_b]                (3M)
//! o   = LeakyReLU(BN(Dropout(fc2(h))))           (M)
//! log_probs = LogSoftmax(fc3(o))                 (class 0 = different, 1 = same)
//! ```
//!
//! The scalar score is `s = exp(log_probs[1])`; the hard decision is `s >= tau`.

use ndarray::{s, Array2, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Backbone, Embedding};
use crate::corpus::Segment;
use crate::nn::{
    dropout, join, leaky_relu, leaky_relu_backward, log_softmax_rows, BatchNorm, BnCache, Linear,
    Mode, Module, Param,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Extractor embedding size L.
    pub embedding_dim: usize,
    /// Projection size M.
    pub projection_dim: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Average `S(A, B)` and `S(B, A)` at inference. Off by default.
    #[serde(default)]
    pub symmetrize: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            projection_dim: 64,
            dropout: 0.5,
            leaky_slope: 0.01,
            symmetrize: false,
        }
    }
}

/// Two-class log-probabilities and the "same source" probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub log_probs: [f64; 2],
    pub s: f64,
}

impl SimilarityScore {
    pub fn from_log_probs(log_probs: [f64; 2]) -> Self {
        Self {
            log_probs,
            s: log_probs[1].exp(),
        }
    }
}

/// Hard same-source decision: 1 iff `score.s >= tau`.
pub fn decide(score: &SimilarityScore, tau: f64) -> u8 {
    u8::from(score.s >= tau)
}

/// `[h_a || h_b || h_a * h_b]`.
pub fn fuse(h_a: &[f64], h_b: &[f64]) -> Result<Vec<f64>> {
    if h_a.len() != h_b.len() {
        return Err(Error::Shape(format!(
            "fuse needs equal lengths, got {} and {}",
            h_a.len(),
            h_b.len()
        )));
    }
    let mut out = Vec::with_capacity(3 * h_a.len());
    out.extend_from_slice(h_a);
    out.extend_from_slice(h_b);
    out.extend(h_a.iter().zip(h_b).map(|(a, b)| a * b));
    Ok(out)
}

fn fuse_rows(h_a: &Array2<f64>, h_b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = h_a.dim();
    let mut out = Array2::zeros((n, 3 * m));
    out.slice_mut(s![.., ..m]).assign(h_a);
    out.slice_mut(s![.., m..2 * m]).assign(h_b);
    out.slice_mut(s![.., 2 * m..]).assign(&(h_a * h_b));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHead {
    pub cfg: HeadConfig,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: BatchNorm,
    pub fc3: Linear,
}

/// Intermediate values of a training forward pass.
#[derive(Debug)]
pub struct HeadTape {
    e_a: Array2<f64>,
    e_b: Array2<f64>,
    h_a: Array2<f64>,
    h_b: Array2<f64>,
    fused: Array2<f64>,
    drop_mask: Array2<f64>,
    norm: BnCache,
    normed: Array2<f64>,
    h_out: Array2<f64>,
}

impl SimilarityHead {
    pub fn new(cfg: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.embedding_dim == 0 || cfg.projection_dim == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        let (l, m) = (cfg.embedding_dim, cfg.projection_dim);
        Ok(Self {
            fc1: Linear::new(l, m, rng),
            fc2: Linear::new(3 * m, m, rng),
            norm: BatchNorm::new(m),
            fc3: Linear::new(m, 2, rng),
            cfg,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    pub fn projection_dim(&self) -> usize {
        self.cfg.projection_dim
    }

    fn check_embedding(&self, len: usize) -> Result<()> {
        if len != self.cfg.embedding_dim {
            return Err(Error::Shape(format!(
                "head expects embeddings of length {}, got {len}",
                self.cfg.embedding_dim
            )));
        }
        Ok(())
    }

    /// `h = W_fc1 e + b_fc1`.
    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_embedding(e.len())?;
        let x = Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("row");
        Ok(self.fc1.forward(&x).row(0).to_vec())
    }

    /// Batched inference in eval mode: dropout off, normalization from running statistics.
    pub fn log_probs_eval(&self, e_a: &Array2<f64>, e_b: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_pair(e_a, e_b)?;
        let (h_a, h_b) = (self.fc1.forward(e_a), self.fc1.forward(e_b));
        let z = self.fc2.forward(&fuse_rows(&h_a, &h_b));
        let normed = self.norm.forward_eval(&z.into_dyn());
        let normed = normed.into_dimensionality().expect("2-d");
        let h_out = leaky_relu(&normed, self.cfg.leaky_slope);
        Ok(log_softmax_rows(&self.fc3.forward(&h_out)))
    }

    /// Same-source probabilities of a batch, honoring `symmetrize`.
    pub fn scores_eval(&self, e_a: &Array2<f64>, e_b: &Array2<f64>) -> Result<Vec<f64>> {
        let lp = self.log_probs_eval(e_a, e_b)?;
        let mut s: Vec<f64> = lp.column(1).iter().map(|v| v.exp()).collect();
        if self.cfg.symmetrize {
            let rev = self.log_probs_eval(e_b, e_a)?;
            for (v, r) in s.iter_mut().zip(rev.column(1)) {
                *v = 0.5 * (*v + r.exp());
            }
        }
        Ok(s)
    }

    fn check_pair(&self, e_a: &Array2<f64>, e_b: &Array2<f64>) -> Result<()> {
        self.check_embedding(e_a.ncols())?;
        self.check_embedding(e_b.ncols())?;
        if e_a.nrows() != e_b.nrows() {
            return Err(Error::Shape("pair batches differ in size".into()));
        }
        Ok(())
    }

    /// Single-pair forward. Eval mode is deterministic; train mode applies dropout with
    /// `rng` and normalizes with statistics of this one-element batch.
    pub fn head_forward(
        &mut self,
        e_a: &Embedding,
        e_b: &Embedding,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<SimilarityScore> {
        let a = Array2::from_shape_vec((1, e_a.len()), e_a.values.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let b = Array2::from_shape_vec((1, e_b.len()), e_b.values.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let lp = match mode {
            Mode::Eval => self.log_probs_eval(&a, &b)?,
            Mode::Train => self.forward_train(&a, &b, mode, rng)?.0,
        };
        Ok(SimilarityScore::from_log_probs([lp[[0, 0]], lp[[0, 1]]]))
    }

    /// Forward pass recording activations for [`SimilarityHead::backward`]. In train
    /// mode dropout is sampled from `rng` and normalization uses batch statistics; in
    /// eval mode both are fixed, which makes the map differentiable with constant
    /// statistics.
    pub fn forward_train(
        &mut self,
        e_a: &Array2<f64>,
        e_b: &Array2<f64>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Array2<f64>, HeadTape)> {
        self.check_pair(e_a, e_b)?;
        let (h_a, h_b) = (self.fc1.forward(e_a), self.fc1.forward(e_b));
        let fused = fuse_rows(&h_a, &h_b);
        let z = self.fc2.forward(&fused);
        let (dropped, drop_mask) = match mode {
            Mode::Train => dropout(&z, self.cfg.dropout, rng),
            Mode::Eval => {
                let ones = Array2::ones(z.raw_dim());
                (z, ones)
            }
        };
        let (normed, norm) = self.norm.forward(&dropped.into_dyn(), mode);
        let normed: Array2<f64> = normed.into_dimensionality().expect("2-d");
        let h_out = leaky_relu(&normed, self.cfg.leaky_slope);
        let log_probs = log_softmax_rows(&self.fc3.forward(&h_out));
        Ok((
            log_probs,
            HeadTape {
                e_a: e_a.clone(),
                e_b: e_b.clone(),
                h_a,
                h_b,
                fused,
                drop_mask,
                norm,
                normed,
                h_out,
            },
        ))
    }

    /// Back-propagates `dL/d(fc3 output)`; accumulates parameter gradients and returns
    /// the gradients w.r.t. both embedding batches.
    pub fn backward(&mut self, tape: &HeadTape, d_logits: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let m = self.cfg.projection_dim;
        let d_hout = self.fc3.backward(&tape.h_out, d_logits);
        let d_normed = leaky_relu_backward(&tape.normed, &d_hout, self.cfg.leaky_slope);
        let d_dropped = self.norm.backward(&tape.norm, &d_normed.into_dyn());
        let d_dropped: Array2<f64> = d_dropped.into_dimensionality().expect("2-d");
        let d_z = d_dropped * &tape.drop_mask;
        let d_fused = self.fc2.backward(&tape.fused, &d_z);
        let d_prod = d_fused.slice(s![.., 2 * m..]);
        let d_ha = &d_fused.slice(s![.., ..m]) + &(&d_prod * &tape.h_b);
        let d_hb = &d_fused.slice(s![.., m..2 * m]) + &(&d_prod * &tape.h_a);
        let d_ea = self.fc1.backward(&tape.e_a, &d_ha);
        let d_eb = self.fc1.backward(&tape.e_b, &d_hb);
        (d_ea, d_eb)
    }
}

impl Module for SimilarityHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.fc3.visit_params(&join(prefix, "fc3"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.fc1.visit_state(&join(prefix, "fc1"), f);
        self.fc2.visit_state(&join(prefix, "fc2"), f);
        self.norm.visit_state(&join(prefix, "norm"), f);
        self.fc3.visit_state(&join(prefix, "fc3"), f);
    }
}

/// Scores segment pairs end to end: backbone embeddings, then the head in eval mode.
pub fn score_segment_pairs(
    backbone: &dyn Backbone,
    head: &SimilarityHead,
    pairs: &[(&Segment, &Segment)],
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let a: Vec<&Segment> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<&Segment> = pairs.iter().map(|p| p.1).collect();
    let e_a = backbone.embed_batch(&a)?;
    let e_b = backbone.embed_batch(&b)?;
    head.scores_eval(&e_a, &e_b)
}

/// Stacks embeddings into a `[N, L]` batch.
pub fn stack_embeddings(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let l = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), l));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        if src.len() != l {
            return Err(Error::Shape("embedding batch mixes lengths".into()));
        }
        dst.assign(&ndarray::ArrayView1::from(*src));
    }
    Ok(out)
}
