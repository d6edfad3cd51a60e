//! Verification metrics, threshold calibration, the per-generator detection matrix and
//! the embedding-distance baselines.
//!
//! ROC convention: a trial is predicted "same source" when `score >= tau`; positives
//! are same-generator pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_pair_indices, Segment, StartMode, UtterancePool};
use crate::error::{Error, Result};
use crate::features::{embed_in_chunks, Backbone};
use crate::similarity::SimilarityHead;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub score: f64,
    pub label: u8,
    pub generator_a: usize,
    pub generator_b: usize,
}

impl ScoredTrial {
    pub fn new(score: f64, label: u8) -> Self {
        Self {
            score,
            label,
            generator_a: 0,
            generator_b: usize::from(label == 0),
        }
    }
}

fn class_counts(trials: &[ScoredTrial]) -> Result<(u64, u64)> {
    let p = trials.iter().filter(|t| t.label == 1).count() as u64;
    let n = trials.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass {
            positives: p as usize,
            negatives: n as usize,
        });
    }
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::invalid("trial scores must be finite"));
    }
    Ok((p, n))
}

/// Per distinct score, ascending: `(score, positives, negatives)` at that score.
fn score_groups(trials: &[ScoredTrial]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<(f64, u8)> = trials.iter().map(|t| (t.score, t.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for (s, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if y == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, u64::from(y == 1), u64::from(y != 1))),
        }
    }
    groups
}

/// Area under the ROC curve: the probability that a random positive outscores a random
/// negative, ties counting one half. This equals trapezoidal integration of the ROC over
/// all distinct thresholds.
pub fn auc(trials: &[ScoredTrial]) -> Result<f64> {
    let (p, n) = class_counts(trials)?;
    let mut twice_wins: u128 = 0;
    let mut negatives_below: u64 = 0;
    for (_, pos, neg) in score_groups(trials) {
        twice_wins += 2 * u128::from(pos) * u128::from(negatives_below) + u128::from(pos) * u128::from(neg);
        negatives_below += neg;
    }
    Ok(twice_wins as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

/// One candidate operating point of the EER sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    /// Representative threshold of the interval.
    pub tau: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// The threshold sweep behind [`eer`]. With distinct scores `s_1 < ... < s_n`, point `k`
/// uses the error rates at threshold `s_k` and represents the interval
/// `(s_{k-1}, s_k]` by its midpoint (`s_1` itself for `k = 1`). A final point at `s_n`
/// with `FPR = 0, FNR = 1` stands for thresholds above every score.
pub fn eer_sweep(trials: &[ScoredTrial]) -> Result<Vec<SweepPoint>> {
    let (p, n) = class_counts(trials)?;
    let groups = score_groups(trials);
    let mut points = Vec::with_capacity(groups.len() + 1);
    let mut pos_below = 0u64;
    let mut neg_below = 0u64;
    let mut prev: Option<f64> = None;
    for &(s, pos, neg) in &groups {
        let tau = prev.map_or(s, |q| 0.5 * (q + s));
        points.push(SweepPoint {
            tau,
            fpr: (n - neg_below) as f64 / n as f64,
            fnr: pos_below as f64 / p as f64,
        });
        pos_below += pos;
        neg_below += neg;
        prev = Some(s);
    }
    points.push(SweepPoint {
        tau: groups.last().expect("non-empty").0,
        fpr: 0.0,
        fnr: 1.0,
    });
    Ok(points)
}

/// Equal error rate and its threshold: the first sweep point where `FPR - FNR <= 0` and
/// its predecessor bracket the crossing; both the rate and the threshold are linearly
/// interpolated there.
pub fn eer(trials: &[ScoredTrial]) -> Result<(f64, f64)> {
    Ok(eer_from_sweep(&eer_sweep(trials)?))
}

/// Linear interpolation of the `FPR = FNR` crossing along a sweep whose first point
/// has `FPR - FNR > 0` and whose last has `FPR - FNR < 0`.
pub fn eer_from_sweep(points: &[SweepPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|q| q.fpr - q.fnr <= 0.0)
        .expect("the final sweep point has FPR - FNR = -1");
    let (a, b) = (points[k - 1], points[k]);
    let (da, db) = (a.fpr - a.fnr, b.fpr - b.fnr);
    let t = da / (da - db);
    (a.fpr + t * (b.fpr - a.fpr), a.tau + t * (b.tau - a.tau))
}

/// The decision threshold tuned on validation trials: the EER threshold.
pub fn calibrate_threshold(val_trials: &[ScoredTrial]) -> Result<f64> {
    Ok(eer(val_trials)?.1)
}

/// ROC curve `(fpr, tpr)` from the strictest to the loosest threshold.
pub fn roc_curve(trials: &[ScoredTrial]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = class_counts(trials)?;
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (_, pos, neg) in score_groups(trials).into_iter().rev() {
        tp += pos;
        fp += neg;
        out.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Cosine,
    Euclidean,
}

/// Embedding-distance baselines mapped to "higher is more similar": cosine gives
/// `(1 + cos) / 2`, Euclidean gives `exp(-||a - b||)`.
pub fn baseline_score(e_a: &[f64], e_b: &[f64], kind: BaselineKind) -> Result<f64> {
    if e_a.len() != e_b.len() {
        return Err(Error::Shape(format!(
            "baseline needs equal lengths, got {} and {}",
            e_a.len(),
            e_b.len()
        )));
    }
    match kind {
        BaselineKind::Cosine => {
            let dot: f64 = e_a.iter().zip(e_b).map(|(a, b)| a * b).sum();
            let na = e_a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = e_b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::invalid("cosine similarity of a zero vector"));
            }
            Ok((1.0 + (dot / (na * nb)).clamp(-1.0, 1.0)) / 2.0)
        }
        BaselineKind::Euclidean => {
            let d2: f64 = e_a.iter().zip(e_b).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((-d2.sqrt()).exp())
        }
    }
}

/// Anything that scores segment pairs through per-segment embeddings.
pub trait PairScorer {
    fn segment_len(&self) -> usize;

    /// Embeddings `[N, D]` of equal-length segments.
    fn embed(&self, segments: &[&Segment]) -> Result<Array2<f64>>;

    /// Same-source scores of row-aligned embedding pairs.
    fn score(&self, e_a: &Array2<f64>, e_b: &Array2<f64>) -> Result<Vec<f64>>;
}

/// Extractor embeddings scored by the trained similarity head.
pub struct SiameseScorer<'a> {
    pub backbone: &'a dyn Backbone,
    pub head: &'a SimilarityHead,
    pub segment_len: usize,
}

impl PairScorer for SiameseScorer<'_> {
    fn segment_len(&self) -> usize {
        self.segment_len
    }

    fn embed(&self, segments: &[&Segment]) -> Result<Array2<f64>> {
        embed_in_chunks(self.backbone, segments)
    }

    fn score(&self, e_a: &Array2<f64>, e_b: &Array2<f64>) -> Result<Vec<f64>> {
        self.head.scores_eval(e_a, e_b)
    }
}

/// Extractor embeddings scored by a fixed distance map.
pub struct BaselineScorer<'a> {
    pub backbone: &'a dyn Backbone,
    pub kind: BaselineKind,
    pub segment_len: usize,
}

impl PairScorer for BaselineScorer<'_> {
    fn segment_len(&self) -> usize {
        self.segment_len
    }

    fn embed(&self, segments: &[&Segment]) -> Result<Array2<f64>> {
        embed_in_chunks(self.backbone, segments)
    }

    fn score(&self, e_a: &Array2<f64>, e_b: &Array2<f64>) -> Result<Vec<f64>> {
        e_a.rows()
            .into_iter()
            .zip(e_b.rows())
            .map(|(a, b)| baseline_score(&a.to_vec(), &b.to_vec(), self.kind))
            .collect()
    }
}

/// Scores every pair with the same value, whatever the audio.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer {
    pub value: f64,
    pub segment_len: usize,
}

impl PairScorer for ConstantScorer {
    fn segment_len(&self) -> usize {
        self.segment_len
    }

    fn embed(&self, segments: &[&Segment]) -> Result<Array2<f64>> {
        Ok(Array2::zeros((segments.len(), 0)))
    }

    fn score(&self, e_a: &Array2<f64>, _e_b: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(vec![self.value; e_a.nrows()])
    }
}

/// Embeddings of pool utterances cut at offset 0, keyed by utterance index.
pub fn embedding_cache(
    scorer: &dyn PairScorer,
    pool: &UtterancePool,
    indices: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut unique: Vec<usize> = indices.into_iter().collect();
    unique.sort_unstable();
    unique.dedup();
    let mut no_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let segments = unique
        .iter()
        .map(|&i| pool.segment(i, scorer.segment_len(), StartMode::Zero, &mut no_rng))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Segment> = segments.iter().collect();
    let e = scorer.embed(&refs)?;
    Ok(unique.into_iter().zip(e.rows()).map(|(i, r)| (i, r.to_vec())).collect())
}

fn stack(cache: &BTreeMap<usize, Vec<f64>>, indices: impl ExactSizeIterator<Item = usize>) -> Array2<f64> {
    let d = cache.values().next().map_or(0, Vec::len);
    let mut m = Array2::zeros((indices.len(), d));
    for (mut row, i) in m.rows_mut().into_iter().zip(indices) {
        row.assign(&ArrayView1::from(&cache[&i]));
    }
    m
}

/// Scores utterance pairs (offset-0 segments, each utterance embedded once).
pub fn score_index_pairs(
    scorer: &dyn PairScorer,
    pool: &UtterancePool,
    pairs: &[(usize, usize)],
) -> Result<Vec<ScoredTrial>> {
    let cache = embedding_cache(scorer, pool, pairs.iter().flat_map(|&(a, b)| [a, b]))?;
    let e_a = stack(&cache, pairs.iter().map(|p| p.0));
    let e_b = stack(&cache, pairs.iter().map(|p| p.1));
    let scores = scorer.score(&e_a, &e_b)?;
    Ok(pairs
        .iter()
        .zip(scores)
        .map(|(&(a, b), score)| {
            let (ga, gb) = (pool.record(a).generator_label, pool.record(b).generator_label);
            ScoredTrial {
                score,
                label: u8::from(ga == gb),
                generator_a: ga,
                generator_b: gb,
            }
        })
        .collect())
}

/// `n` seeded verification pairs (50/50 same/different) drawn with the pair sampler.
pub fn sample_index_pairs(pool: &UtterancePool, n: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    (0..n).map(|_| sample_pair_indices(pool, rng)).collect()
}

pub fn sample_trials(
    scorer: &dyn PairScorer,
    pool: &UtterancePool,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ScoredTrial>> {
    let pairs = sample_index_pairs(pool, n, rng)?;
    score_index_pairs(scorer, pool, &pairs)
}

/// Correct-decision rates per ordered generator pair: the diagonal holds the fraction of
/// same-generator pairs accepted, off-diagonal cells the fraction of cross-generator
/// pairs rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatrix {
    pub generators: Vec<usize>,
    /// Row `g`, column `h`: cell for pairs (utterance of `g`, utterance of `h`).
    pub values: Vec<Vec<f64>>,
    pub tau: f64,
}

impl DetectionMatrix {
    pub fn mean_diagonal(&self) -> f64 {
        let g = self.generators.len();
        (0..g).map(|i| self.values[i][i]).sum::<f64>() / g as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let g = self.generators.len();
        if g < 2 {
            return f64::NAN;
        }
        let total: f64 = (0..g)
            .flat_map(|i| (0..g).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .sum();
        total / (g * (g - 1)) as f64
    }

    /// Average of the ordered cells `(g, h)` and `(h, g)`.
    pub fn symmetrized(&self) -> Vec<Vec<f64>> {
        let g = self.generators.len();
        (0..g)
            .map(|i| (0..g).map(|j| 0.5 * (self.values[i][j] + self.values[j][i])).collect())
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(path.as_ref(), &self.generators, &self.values)
    }
}

pub fn write_matrix_csv(path: &Path, generators: &[usize], values: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["generator".to_string()];
    header.extend(generators.iter().map(|g| g.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (g, row) in generators.iter().zip(values) {
        let mut rec = vec![g.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trials_csv(path: impl AsRef<Path>, trials: &[ScoredTrial]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for t in trials {
        w.serialize(t).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Samples `pairs_per_cell` pairs for every ordered generator cell of `pool` and records
/// the rate of correct `s >= tau` decisions.
pub fn detection_matrix(
    scorer: &dyn PairScorer,
    pool: &UtterancePool,
    tau: f64,
    pairs_per_cell: usize,
    rng: &mut impl Rng,
) -> Result<DetectionMatrix> {
    if pairs_per_cell == 0 {
        return Err(Error::invalid("pairs_per_cell must be at least 1"));
    }
    let generators = pool.generators();
    for &g in &generators {
        let n = pool.utterances_of(g).len();
        if n < 2 {
            return Err(Error::SplitTooSmall(format!(
                "generator {g} has {n} utterance(s); the matrix needs 2"
            )));
        }
    }
    let mut pairs = Vec::with_capacity(generators.len() * generators.len() * pairs_per_cell);
    for &g in &generators {
        for &h in &generators {
            for _ in 0..pairs_per_cell {
                let pair = if g == h {
                    let two: Vec<usize> = pool.utterances_of(g).choose_multiple(rng, 2).copied().collect();
                    (two[0], two[1])
                } else {
                    (
                        *pool.utterances_of(g).choose(rng).expect("non-empty"),
                        *pool.utterances_of(h).choose(rng).expect("non-empty"),
                    )
                };
                pairs.push(pair);
            }
        }
    }
    let trials = score_index_pairs(scorer, pool, &pairs)?;
    let g = generators.len();
    let mut values = vec![vec![0.0; g]; g];
    for (cell, chunk) in trials.chunks(pairs_per_cell).enumerate() {
        let (i, j) = (cell / g, cell % g);
        let correct = chunk
            .iter()
            .filter(|t| u8::from(t.score >= tau) == u8::from(i == j))
            .count();
        values[i][j] = correct as f64 / pairs_per_cell as f64;
    }
    Ok(DetectionMatrix { generators, values, tau })
}

/// EER/AUC summary of one scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub eer: f64,
    pub auc: f64,
    pub tau: f64,
}

impl VerificationMetrics {
    pub fn of(trials: &[ScoredTrial]) -> Result<Self> {
        let (eer, tau) = eer(trials)?;
        Ok(Self {
            eer,
            auc: auc(trials)?,
            tau,
        })
    }
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trials(pos: &[f64], neg: &[f64]) -> Vec<ScoredTrial> {
        pos.iter()
            .map(|&s| ScoredTrial::new(s, 1))
            .chain(neg.iter().map(|&s| ScoredTrial::new(s, 0)))
            .collect()
    }

    #[test]
    fn worked_example() {
        let t = trials(&[0.9, 0.8, 0.4], &[0.7, 0.3, 0.2]);
        assert_eq!(auc(&t).unwrap(), 8.0 / 9.0);
        let (e, tau) = eer(&t).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
        assert!((tau - 0.55).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation() {
        let t = trials(&[0.8, 0.9, 1.0], &[0.0, 0.1, 0.2]);
        assert_eq!(auc(&t).unwrap(), 1.0);
        let (e, tau) = eer(&t).unwrap();
        assert_eq!(e, 0.0);
        assert!(tau > 0.2 && tau <= 0.8);
        assert!((tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_scores() {
        let t = trials(&[0.4; 5], &[0.4; 7]);
        assert_eq!(auc(&t).unwrap(), 0.5);
        assert_eq!(eer(&t).unwrap(), (0.5, 0.4));
        assert_eq!(calibrate_threshold(&t).unwrap(), 0.4);
    }

    #[test]
    fn single_class_is_rejected() {
        let t = trials(&[0.1, 0.2], &[]);
        assert!(matches!(auc(&t), Err(Error::SingleClass { positives: 2, negatives: 0 })));
        assert!(eer(&t).is_err());
        assert!(calibrate_threshold(&trials(&[], &[0.3])).is_err());
    }

    #[test]
    fn roc_ends_at_corners() {
        let t = trials(&[0.9, 0.8, 0.4], &[0.7, 0.3, 0.2]);
        let roc = roc_curve(&t).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn baseline_examples() {
        assert!((baseline_score(&[1.0, 2.0], &[1.0, 2.0], BaselineKind::Cosine).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(baseline_score(&[1.0, 2.0], &[1.0, 2.0], BaselineKind::Euclidean).unwrap(), 1.0);
        assert!((baseline_score(&[1.0, 0.0], &[0.0, 1.0], BaselineKind::Cosine).unwrap() - 0.5).abs() < 1e-12);
        let e = baseline_score(&[1.0, 0.0], &[0.0, 1.0], BaselineKind::Euclidean).unwrap();
        assert!((e - (-(2f64).sqrt()).exp()).abs() < 1e-15);
        assert!(baseline_score(&[0.0, 0.0], &[1.0, 0.0], BaselineKind::Cosine).is_err());
        assert!(baseline_score(&[1.0], &[1.0, 0.0], BaselineKind::Euclidean).is_err());
    }
}
