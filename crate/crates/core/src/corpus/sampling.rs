use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::audio::{fit_segment, Segment, Waveform};
use super::manifest::{Manifest, ManifestRecord, Split};
use crate::error::{Error, Result};

/// How segment start offsets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// Uniform over `[0, len - segment_len]` (0 when the utterance is shorter).
    Random,
    /// Always 0, for reproducible evaluation.
    Zero,
}

/// Loaded utterances of one split, grouped by generator label.
#[derive(Debug, Clone)]
pub struct UtterancePool {
    records: Vec<ManifestRecord>,
    waveforms: Vec<Arc<Waveform>>,
    by_generator: BTreeMap<usize, Vec<usize>>,
}

impl UtterancePool {
    /// Loads every record of `split`. Relative WAV paths resolve against `base_dir`.
    pub fn load(manifest: &Manifest, split: Split, base_dir: &Path) -> Result<Self> {
        let records: Vec<ManifestRecord> = manifest.in_split(split).cloned().collect();
        let waveforms = records
            .iter()
            .map(|r| r.load(base_dir).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(records, waveforms))
    }

    pub fn from_parts(records: Vec<ManifestRecord>, waveforms: Vec<Arc<Waveform>>) -> Self {
        assert_eq!(records.len(), waveforms.len());
        let mut by_generator: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_generator.entry(r.generator_label).or_default().push(i);
        }
        Self {
            records,
            waveforms,
            by_generator,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn generators(&self) -> Vec<usize> {
        self.by_generator.keys().copied().collect()
    }

    pub fn utterances_of(&self, generator: usize) -> &[usize] {
        self.by_generator
            .get(&generator)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn record(&self, index: usize) -> &ManifestRecord {
        &self.records[index]
    }

    pub fn waveform(&self, index: usize) -> &Waveform {
        &self.waveforms[index]
    }

    /// Cuts a segment of utterance `index`.
    pub fn segment(
        &self,
        index: usize,
        segment_len: usize,
        mode: StartMode,
        rng: &mut impl Rng,
    ) -> Result<Segment> {
        let w = &self.waveforms[index];
        let start = match mode {
            StartMode::Zero => 0,
            StartMode::Random if w.len() > segment_len => rng.random_range(0..=w.len() - segment_len),
            StartMode::Random => 0,
        };
        fit_segment(w, &self.records[index].audio_ref, segment_len, start)
    }
}

/// Two segments with a same-generator label.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub segment_a: Segment,
    pub segment_b: Segment,
    /// 1 iff both segments come from the same generator.
    pub label: u8,
    pub generator_a: usize,
    pub generator_b: usize,
    pub utterance_a: usize,
    pub utterance_b: usize,
}

/// Picks the utterance indices for one pair: with probability 0.5 two distinct
/// utterances of one generator, otherwise one utterance each of two distinct generators.
/// Generators are chosen uniformly.
pub fn sample_pair_indices(pool: &UtterancePool, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let gens = pool.generators();
    if gens.len() < 2 {
        return Err(Error::SplitTooSmall(format!(
            "pair sampling needs 2 generators, split has {}",
            gens.len()
        )));
    }
    if rng.random_bool(0.5) {
        let g = *gens.choose(rng).expect("non-empty");
        let utts = pool.utterances_of(g);
        if utts.len() < 2 {
            return Err(Error::SplitTooSmall(format!(
                "generator {g} has {} utterance(s); same-source pairs need 2",
                utts.len()
            )));
        }
        let picked: Vec<usize> = utts.choose_multiple(rng, 2).copied().collect();
        Ok((picked[0], picked[1]))
    } else {
        let picked: Vec<usize> = gens.choose_multiple(rng, 2).copied().collect();
        let a = *pool.utterances_of(picked[0]).choose(rng).expect("non-empty group");
        let b = *pool.utterances_of(picked[1]).choose(rng).expect("non-empty group");
        Ok((a, b))
    }
}

/// Draws a labelled segment pair (see [`sample_pair_indices`]).
pub fn sample_pair(
    pool: &UtterancePool,
    segment_len: usize,
    mode: StartMode,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    let (a, b) = sample_pair_indices(pool, rng)?;
    pair_from_indices(pool, a, b, segment_len, mode, rng)
}

pub fn pair_from_indices(
    pool: &UtterancePool,
    a: usize,
    b: usize,
    segment_len: usize,
    mode: StartMode,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    let generator_a = pool.record(a).generator_label;
    let generator_b = pool.record(b).generator_label;
    Ok(PairSample {
        segment_a: pool.segment(a, segment_len, mode, rng)?,
        segment_b: pool.segment(b, segment_len, mode, rng)?,
        label: u8::from(generator_a == generator_b),
        generator_a,
        generator_b,
        utterance_a: a,
        utterance_b: b,
    })
}

/// Uniform over generators first, then uniform over that generator's utterances.
pub fn sample_class_balanced_index(pool: &UtterancePool, rng: &mut impl Rng) -> Result<usize> {
    let gens = pool.generators();
    let g = gens
        .choose(rng)
        .ok_or_else(|| Error::SplitTooSmall("cannot sample from an empty split".into()))?;
    Ok(*pool.utterances_of(*g).choose(rng).expect("non-empty group"))
}

pub fn sample_class_balanced_segment(
    pool: &UtterancePool,
    segment_len: usize,
    mode: StartMode,
    rng: &mut impl Rng,
) -> Result<(Segment, usize)> {
    let index = sample_class_balanced_index(pool, rng)?;
    let seg = pool.segment(index, segment_len, mode, rng)?;
    Ok((seg, pool.record(index).generator_label))
}
