use std::fmt;

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lcnn::{LcnnConfig, LcnnNet, LcnnTape};
use super::mel::{MelFrontend, MelSpecConfig};
use crate::corpus::{Segment, SegmentOrigin, StartMode, UtterancePool};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Mode, Module, Param};

/// Identifier of the default backbone in checkpoints.
pub const LCNN_BACKBONE_ID: &str = "lcnn-compact";

/// An embedding `f(x)` read from the extractor's last hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: SegmentOrigin,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which training stage produced a set of extractor weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingPhase {
    Initialized,
    Phase1,
    Phase2,
}

impl fmt::Display for TrainingPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingPhase::Initialized => "initialized",
            TrainingPhase::Phase1 => "phase1",
            TrainingPhase::Phase2 => "phase2",
        })
    }
}

/// The inference contract every feature extractor offers. Downstream code (the
/// similarity head, evaluation, splicing) only relies on this trait.
pub trait Backbone: Send + Sync {
    fn backbone_id(&self) -> &str;

    fn embedding_dim(&self) -> usize;

    fn n_classes(&self) -> usize;

    /// Embeddings `[N, L]` for a batch of equal-length segments (inference mode).
    fn embed_batch(&self, segments: &[&Segment]) -> Result<Array2<f64>>;

    /// Class scores `[N, C]` for a batch of equal-length segments.
    fn logits_batch(&self, segments: &[&Segment]) -> Result<Array2<f64>>;

    fn extract_embedding(&self, segment: &Segment) -> Result<Embedding> {
        let e = self.embed_batch(&[segment])?;
        Ok(Embedding {
            values: e.row(0).to_vec(),
            source: segment.origin.clone(),
        })
    }

    /// Closed-set source tracing: one score per training generator; argmax is the
    /// predicted generator.
    fn classify_source(&self, segment: &Segment) -> Result<Vec<f64>> {
        Ok(self.logits_batch(&[segment])?.row(0).to_vec())
    }
}

/// Batch size used when embedding many segments for inference; keeps the largest
/// activation tensors small enough to be recycled by the allocator.
pub const INFERENCE_CHUNK: usize = 8;

/// Embeds any number of equal-length segments, [`INFERENCE_CHUNK`] at a time.
pub fn embed_in_chunks(backbone: &dyn Backbone, segments: &[&Segment]) -> Result<Array2<f64>> {
    let l = backbone.embedding_dim();
    let mut out = Array2::zeros((segments.len(), l));
    for (i, chunk) in segments.chunks(INFERENCE_CHUNK).enumerate() {
        let e = backbone.embed_batch(chunk)?;
        let start = i * INFERENCE_CHUNK;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&e);
    }
    Ok(out)
}

/// Embeddings of pool utterances, each cut at offset 0 (the deterministic evaluation
/// segment), keyed by utterance index.
pub fn embed_utterances(
    backbone: &dyn Backbone,
    pool: &UtterancePool,
    indices: impl IntoIterator<Item = usize>,
    segment_len: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut unique: Vec<usize> = indices.into_iter().collect();
    unique.sort_unstable();
    unique.dedup();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let segments = unique
        .iter()
        .map(|&i| pool.segment(i, segment_len, StartMode::Zero, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Segment> = segments.iter().collect();
    let e = embed_in_chunks(backbone, &refs)?;
    Ok(unique
        .into_iter()
        .zip(e.rows())
        .map(|(i, row)| (i, row.to_vec()))
        .collect())
}

/// Log-mel frontend, LCNN-style body and the closed-set classification head.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub frontend: MelFrontend,
    pub net: LcnnNet,
    pub head: Linear,
    pub phase: TrainingPhase,
    /// Segment length (samples) the weights were last trained on.
    pub segment_len: usize,
    /// Generator labels of the closed-set classes, in class-index order.
    pub class_labels: Vec<usize>,
}

impl Extractor {
    pub fn new(
        mel: MelSpecConfig,
        lcnn: LcnnConfig,
        class_labels: Vec<usize>,
        segment_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if class_labels.len() < 2 {
            return Err(Error::invalid(format!(
                "closed-set source tracing needs at least 2 classes, got {}",
                class_labels.len()
            )));
        }
        let frontend = MelFrontend::new(mel)?;
        let net = LcnnNet::new(lcnn, frontend.config().n_mels, rng)?;
        let head = Linear::new(net.embedding_dim(), class_labels.len(), rng);
        Ok(Self {
            frontend,
            net,
            head,
            phase: TrainingPhase::Initialized,
            segment_len,
            class_labels,
        })
    }

    /// Log-mel features `[N, 1, n_mels, T]` of equal-length segments.
    pub fn features(&self, segments: &[&Segment]) -> Result<Array4<f64>> {
        let first = segments
            .first()
            .ok_or_else(|| Error::invalid("empty segment batch"))?;
        let len = first.len();
        let n_mels = self.frontend.config().n_mels;
        let frames = self.frontend.config().n_frames(len).ok_or_else(|| {
            Error::Shape(format!("segment of {len} samples is shorter than one frame"))
        })?;
        let mut x = Array4::<f64>::zeros((segments.len(), 1, n_mels, frames));
        for (i, seg) in segments.iter().enumerate() {
            if seg.len() != len {
                return Err(Error::Shape(format!(
                    "batch mixes segment lengths {len} and {}",
                    seg.len()
                )));
            }
            let mel = self.frontend.compute(&seg.samples)?;
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&mel.values);
        }
        Ok(x)
    }

    pub fn embed_features(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.net.forward_eval(x)
    }

    pub fn forward_train(&mut self, x: &Array4<f64>, mode: Mode) -> Result<(Array2<f64>, LcnnTape)> {
        self.net.forward_train(x, mode)
    }

    pub fn backward_embedding(&mut self, tape: &LcnnTape, d_embedding: &Array2<f64>) {
        self.net.backward(tape, d_embedding);
    }

    /// Maps a generator label to its class index, if it is one of the training classes.
    pub fn class_index(&self, generator_label: usize) -> Option<usize> {
        self.class_labels.iter().position(|&l| l == generator_label)
    }
}

impl Backbone for Extractor {
    fn backbone_id(&self) -> &str {
        LCNN_BACKBONE_ID
    }

    fn embedding_dim(&self) -> usize {
        self.net.embedding_dim()
    }

    fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    fn embed_batch(&self, segments: &[&Segment]) -> Result<Array2<f64>> {
        self.embed_features(&self.features(segments)?)
    }

    fn logits_batch(&self, segments: &[&Segment]) -> Result<Array2<f64>> {
        Ok(self.head.forward(&self.embed_batch(segments)?))
    }
}

impl Module for Extractor {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params(&join(prefix, "net"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.net.visit_state(&join(prefix, "net"), f);
        self.head.visit_state(&join(prefix, "head"), f);
    }
}
