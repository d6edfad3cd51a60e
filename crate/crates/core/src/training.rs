//! Phase 1 (closed-set source tracing) and Phase 2 (Siamese similarity learning).

use std::path::Path;

use log::info;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    sample_class_balanced_index, sample_pair_indices, seconds_to_samples, stratified_split,
    Manifest, ManifestRecord, Segment, Split, StartMode, UtterancePool,
};
use crate::error::{Error, Result};
use crate::features::{
    embed_utterances, Backbone, Extractor, LcnnConfig, MelSpecConfig, TrainingPhase,
};
use crate::nn::{log_softmax_rows, nll_grad_from_log_probs, nll_loss, Adam, Mode, Module};
use crate::similarity::{HeadConfig, SimilarityHead};

/// Per-generator stratified split of `records` into `(train, val)`; each generator keeps
/// `round(train_fraction * n)` utterances (at least one on each side) for training.
pub fn split_stratified(
    records: Vec<ManifestRecord>,
    train_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    stratified_split(records, train_fraction, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop: usize,
    pub segment_s: f64,
    /// Used only when the manifest has no validation records of its own.
    pub train_fraction: f64,
    /// Class-balanced draws per epoch; defaults to the number of train utterances.
    pub samples_per_epoch: Option<usize>,
    pub mel: MelSpecConfig,
    pub lcnn: LcnnConfig,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.1,
            early_stop: 20,
            segment_s: 4.0,
            train_fraction: 0.7,
            samples_per_epoch: None,
            mel: MelSpecConfig::default(),
            lcnn: LcnnConfig::default(),
        }
    }
}

impl Phase1Config {
    /// Desk-scale schedule for the toy corpus on one CPU core.
    pub fn toy() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            plateau_patience: 3,
            early_stop: 6,
            ..Self::default()
        }
    }

    pub fn segment_len(&self) -> usize {
        seconds_to_samples(self.segment_s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_schedule(
            self.epochs,
            self.batch_size,
            self.lr,
            self.plateau_patience,
            self.plateau_factor,
            self.early_stop,
        )?;
        if !(self.segment_s > 0.0) || !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("need segment_s > 0 and train_fraction in (0, 1)"));
        }
        self.mel.validate()?;
        self.lcnn.validate(self.mel.n_mels)
    }
}

fn validate_schedule(
    epochs: usize,
    batch_size: usize,
    lr: f64,
    patience: usize,
    factor: f64,
    early_stop: usize,
) -> Result<()> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be at least 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::invalid("plateau factor must lie in (0, 1)"));
    }
    if early_stop < patience {
        return Err(Error::invalid(format!(
            "early_stop ({early_stop}) must be at least plateau_patience ({patience})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Frozen,
    Unfrozen,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Strategy::Frozen),
            "unfrozen" => Ok(Strategy::Unfrozen),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase2Config {
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub strategy: Strategy,
    /// Defaults to the number of train utterances.
    pub pairs_per_epoch: Option<usize>,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop: usize,
    pub segment_s: f64,
    /// Size of the fixed validation pair set.
    pub val_pairs: usize,
    pub train_fraction: f64,
    pub head: HeadConfig,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-4,
            strategy: Strategy::Unfrozen,
            pairs_per_epoch: None,
            plateau_patience: 10,
            plateau_factor: 0.1,
            early_stop: 20,
            segment_s: 4.0,
            val_pairs: 512,
            train_fraction: 0.7,
            head: HeadConfig::default(),
        }
    }
}

impl Phase2Config {
    /// Desk-scale schedule for the toy corpus on one CPU core.
    pub fn toy() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            plateau_patience: 3,
            early_stop: 6,
            val_pairs: 200,
            ..Self::default()
        }
    }

    pub fn segment_len(&self) -> usize {
        seconds_to_samples(self.segment_s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_schedule(
            self.epochs,
            self.batch_size,
            self.lr,
            self.plateau_patience,
            self.plateau_factor,
            self.early_stop,
        )?;
        if !(self.segment_s > 0.0) || self.val_pairs == 0 {
            return Err(Error::invalid("need segment_s > 0 and val_pairs >= 1"));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not improved
/// for more than `patience` consecutive epochs. Improvement means strictly lower.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns true when `lr` was reduced.
    pub fn step(&mut self, loss: f64, lr: &mut f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            *lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Tracks the best validation loss; signals a stop after `patience` consecutive epochs
/// without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records an epoch; returns true if it improved on the best loss so far.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    EpochLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: TrainingPhase,
    pub strategy: Option<Strategy>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub final_lr: f64,
    /// Epochs at which the returned weights were captured (each a val improvement).
    pub checkpoint_epochs: Vec<usize>,
    pub checkpoint_path: Option<String>,
}

impl TrainReport {
    fn new(phase: TrainingPhase, strategy: Option<Strategy>, lr: f64) -> Self {
        Self {
            phase,
            strategy,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            stop_reason: StopReason::EpochLimit,
            final_lr: lr,
            checkpoint_epochs: Vec::new(),
            checkpoint_path: None,
        }
    }
}

/// Train and validation pools of one manifest. When the manifest has no validation
/// records, the train records are split per generator with `train_fraction`.
pub fn load_train_val_pools(
    manifest: &Manifest,
    base_dir: &Path,
    train_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(UtterancePool, UtterancePool)> {
    let has_val = manifest.in_split(Split::Val).next().is_some();
    let (train, val) = if has_val {
        (
            manifest.in_split(Split::Train).cloned().collect(),
            manifest.in_split(Split::Val).cloned().collect(),
        )
    } else {
        split_stratified(manifest.in_split(Split::Train).cloned().collect(), train_fraction, rng)?
    };
    Ok((pool_of(train, base_dir)?, pool_of(val, base_dir)?))
}

fn pool_of(records: Vec<ManifestRecord>, base_dir: &Path) -> Result<UtterancePool> {
    let waveforms = records
        .iter()
        .map(|r| r.load(base_dir).map(std::sync::Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(UtterancePool::from_parts(records, waveforms))
}

fn check_finite(loss: f64, epoch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("{what} loss is {loss}"),
        })
    }
}

/// Phase 1: trains the extractor as a closed-set classifier over the train generators
/// with class-balanced batches and cross-entropy. Returns the best-validation weights.
pub fn train_extractor(
    train: &UtterancePool,
    val: &UtterancePool,
    cfg: &Phase1Config,
    rng: &mut impl Rng,
) -> Result<(Extractor, TrainReport)> {
    cfg.validate()?;
    let classes = train.generators();
    if classes.len() < 2 {
        return Err(Error::invalid(format!(
            "source tracing needs at least 2 train generators, got {}",
            classes.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::SplitTooSmall("validation split is empty".into()));
    }
    let segment_len = cfg.segment_len();
    let mut extractor =
        Extractor::new(cfg.mel.clone(), cfg.lcnn.clone(), classes, segment_len, rng)?;
    let val_targets = (0..val.len())
        .map(|i| {
            let g = val.record(i).generator_label;
            extractor.class_index(g).ok_or_else(|| {
                Error::Manifest(format!("validation generator {g} does not occur in train"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut zero_rng = ChaCha8Rng::seed_from_u64(0);
    let val_segments = (0..val.len())
        .map(|i| val.segment(i, segment_len, StartMode::Zero, &mut zero_rng))
        .collect::<Result<Vec<_>>>()?;

    let per_epoch = cfg.samples_per_epoch.unwrap_or(train.len()).max(1);
    let steps = per_epoch.div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg.lr);
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop);
    let mut report = TrainReport::new(TrainingPhase::Phase1, None, cfg.lr);
    let mut best = extractor.clone();

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let n = cfg.batch_size.min(per_epoch - step * cfg.batch_size);
            let mut segments = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let idx = sample_class_balanced_index(train, rng)?;
                segments.push(train.segment(idx, segment_len, StartMode::Random, rng)?);
                let label = train.record(idx).generator_label;
                targets.push(extractor.class_index(label).expect("train generator is a class"));
            }
            let refs: Vec<&Segment> = segments.iter().collect();
            let x = extractor.features(&refs)?;
            let loss = extractor_step(&mut extractor, &mut opt, &x, &targets)?;
            check_finite(loss, epoch, "training")?;
            total += loss * n as f64;
        }
        let train_loss = total / per_epoch as f64;
        let (val_loss, val_accuracy) = classification_loss(&extractor, &val_segments, &val_targets)?;
        check_finite(val_loss, epoch, "validation")?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            lr: opt.lr,
        });
        info!("phase1 epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.3} lr {:.1e}", opt.lr);
        if stopper.update(val_loss) {
            best = extractor.clone();
            report.best_epoch = epoch;
            report.best_val_loss = val_loss;
            report.checkpoint_epochs.push(epoch);
        }
        plateau.step(val_loss, &mut opt.lr);
        if stopper.should_stop() {
            report.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    report.final_lr = opt.lr;
    best.phase = TrainingPhase::Phase1;
    Ok((best, report))
}

/// One cross-entropy step on features `x`; returns the batch loss.
fn extractor_step(
    extractor: &mut Extractor,
    opt: &mut Adam,
    x: &Array4<f64>,
    targets: &[usize],
) -> Result<f64> {
    extractor.zero_grad();
    let (emb, tape) = extractor.forward_train(x, Mode::Train)?;
    let log_probs = log_softmax_rows(&extractor.head.forward(&emb));
    let loss = nll_loss(&log_probs, targets);
    let d_logits = nll_grad_from_log_probs(&log_probs, targets);
    let d_emb = extractor.head.backward(&emb, &d_logits);
    extractor.backward_embedding(&tape, &d_emb);
    opt.step(&mut [("", extractor)]);
    Ok(loss)
}

/// Mean cross-entropy and top-1 accuracy in inference mode.
pub fn classification_loss(
    extractor: &Extractor,
    segments: &[Segment],
    targets: &[usize],
) -> Result<(f64, f64)> {
    let refs: Vec<&Segment> = segments.iter().collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (chunk, t) in refs
        .chunks(crate::features::INFERENCE_CHUNK)
        .zip(targets.chunks(crate::features::INFERENCE_CHUNK))
    {
        let lp = log_softmax_rows(&extractor.logits_batch(chunk)?);
        loss += nll_loss(&lp, t) * t.len() as f64;
        for (row, &target) in lp.rows().into_iter().zip(t) {
            correct += usize::from(argmax(row.as_slice().expect("row")) == target);
        }
    }
    Ok((loss / targets.len() as f64, correct as f64 / targets.len() as f64))
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// The outcome of Phase 2.
#[derive(Debug, Clone)]
pub struct Phase2Outcome {
    pub head: SimilarityHead,
    pub extractor: Extractor,
    pub report: TrainReport,
}

/// A fixed set of validation pairs, scored on offset-0 segments.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl PairSet {
    pub fn sample(pool: &UtterancePool, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut pairs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = sample_pair_indices(pool, rng)?;
            let same = pool.record(a).generator_label == pool.record(b).generator_label;
            pairs.push((a, b));
            labels.push(usize::from(same));
        }
        Ok(Self { pairs, labels })
    }

    /// Mean NLL and accuracy at `s >= 0.5`.
    pub fn evaluate(
        &self,
        backbone: &dyn Backbone,
        head: &SimilarityHead,
        pool: &UtterancePool,
        segment_len: usize,
    ) -> Result<(f64, f64)> {
        let emb = embed_utterances(
            backbone,
            pool,
            self.pairs.iter().flat_map(|&(a, b)| [a, b]),
            segment_len,
        )?;
        let rows = |pick: fn(&(usize, usize)) -> usize| {
            let l = head.embedding_dim();
            let mut m = Array2::zeros((self.pairs.len(), l));
            for (i, p) in self.pairs.iter().enumerate() {
                m.row_mut(i).assign(&ndarray::ArrayView1::from(&emb[&pick(p)]));
            }
            m
        };
        let lp = head.log_probs_eval(&rows(|p| p.0), &rows(|p| p.1))?;
        let loss = nll_loss(&lp, &self.labels);
        let correct = self
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| usize::from(lp[[i, 1]] >= lp[[i, 0]]) == y)
            .count();
        Ok((loss, correct as f64 / self.labels.len() as f64))
    }
}

/// One head update on embedding pairs; the extractor is not involved. Returns the loss.
pub fn head_step(
    head: &mut SimilarityHead,
    opt: &mut Adam,
    e_a: &Array2<f64>,
    e_b: &Array2<f64>,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<f64> {
    head.zero_grad();
    let (lp, tape) = head.forward_train(e_a, e_b, Mode::Train, rng)?;
    let loss = nll_loss(&lp, labels);
    head.backward(&tape, &nll_grad_from_log_probs(&lp, labels));
    opt.step(&mut [("head", head)]);
    Ok(loss)
}

/// Phase 2: trains the similarity head on labelled pairs with NLL. `Frozen` keeps the
/// extractor fixed (it is returned untouched); `Unfrozen` updates it jointly every step
/// and keeps the copy from the best validation epoch.
pub fn train_similarity(
    extractor: &Extractor,
    train: &UtterancePool,
    val: &UtterancePool,
    cfg: &Phase2Config,
    rng: &mut impl Rng,
) -> Result<Phase2Outcome> {
    cfg.validate()?;
    if extractor.phase == TrainingPhase::Initialized {
        return Err(Error::invalid(
            "similarity training needs an extractor trained for source tracing",
        ));
    }
    if cfg.head.embedding_dim != extractor.embedding_dim() {
        return Err(Error::Shape(format!(
            "head expects L = {}, extractor produces L = {}",
            cfg.head.embedding_dim,
            extractor.embedding_dim()
        )));
    }
    let segment_len = cfg.segment_len();
    let mut head = SimilarityHead::new(cfg.head.clone(), rng)?;
    let mut ext = extractor.clone();
    let mut val_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let val_set = PairSet::sample(val, cfg.val_pairs, &mut val_rng)?;

    let per_epoch = cfg.pairs_per_epoch.unwrap_or(train.len()).max(1);
    let steps = per_epoch.div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg.lr);
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop);
    let mut report = TrainReport::new(TrainingPhase::Phase2, Some(cfg.strategy), cfg.lr);
    let mut best_head = head.clone();
    let mut best_ext = ext.clone();

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let n = cfg.batch_size.min(per_epoch - step * cfg.batch_size);
            let mut seg_a = Vec::with_capacity(n);
            let mut seg_b = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let (a, b) = sample_pair_indices(train, rng)?;
                seg_a.push(train.segment(a, segment_len, StartMode::Random, rng)?);
                seg_b.push(train.segment(b, segment_len, StartMode::Random, rng)?);
                let same = train.record(a).generator_label == train.record(b).generator_label;
                labels.push(usize::from(same));
            }
            let ra: Vec<&Segment> = seg_a.iter().collect();
            let rb: Vec<&Segment> = seg_b.iter().collect();
            let loss = match cfg.strategy {
                Strategy::Frozen => {
                    let e_a = ext.embed_batch(&ra)?;
                    let e_b = ext.embed_batch(&rb)?;
                    head_step(&mut head, &mut opt, &e_a, &e_b, &labels, rng)?
                }
                Strategy::Unfrozen => {
                    head.zero_grad();
                    ext.zero_grad();
                    let (e_a, tape_a) = ext.forward_train(&ext.features(&ra)?, Mode::Train)?;
                    let (e_b, tape_b) = ext.forward_train(&ext.features(&rb)?, Mode::Train)?;
                    let (lp, tape) = head.forward_train(&e_a, &e_b, Mode::Train, rng)?;
                    let loss = nll_loss(&lp, &labels);
                    let (d_a, d_b) = head.backward(&tape, &nll_grad_from_log_probs(&lp, &labels));
                    ext.backward_embedding(&tape_a, &d_a);
                    ext.backward_embedding(&tape_b, &d_b);
                    opt.step(&mut [("head", &mut head), ("extractor", &mut ext)]);
                    loss
                }
            };
            check_finite(loss, epoch, "training")?;
            total += loss * n as f64;
        }
        let train_loss = total / per_epoch as f64;
        let (val_loss, val_accuracy) = val_set.evaluate(&ext, &head, val, segment_len)?;
        check_finite(val_loss, epoch, "validation")?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            lr: opt.lr,
        });
        info!(
            "phase2 ({:?}) epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.3} lr {:.1e}",
            cfg.strategy, opt.lr
        );
        if stopper.update(val_loss) {
            best_head = head.clone();
            if cfg.strategy == Strategy::Unfrozen {
                best_ext = ext.clone();
            }
            report.best_epoch = epoch;
            report.best_val_loss = val_loss;
            report.checkpoint_epochs.push(epoch);
        }
        plateau.step(val_loss, &mut opt.lr);
        if stopper.should_stop() {
            report.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    report.final_lr = opt.lr;
    let extractor = match cfg.strategy {
        Strategy::Frozen => extractor.clone(),
        Strategy::Unfrozen => {
            best_ext.phase = TrainingPhase::Phase2;
            best_ext.segment_len = segment_len;
            best_ext
        }
    };
    Ok(Phase2Outcome {
        head: best_head,
        extractor,
        report,
    })
}
