//! Splice localization: score adjacent window pairs along a track, smooth the score
//! sequence, and look for deep, wide minima.
//!
//! Minima are peaks of the negated sequence. Peak positions follow the usual 1-D peak
//! finder rules: a peak is a sample (or flat run) strictly higher than both
//! neighbours, a flat run reports its middle sample (rounded down), and the first and
//! last samples never qualify. The depth of a minimum is the topographic prominence of
//! its peak: walking outwards from the peak until a strictly higher sample (or the edge)
//! is met, take the lowest value on each side; the prominence is the peak height minus
//! the higher of those two. The width counts the contiguous samples around the peak
//! whose height stays strictly above `peak - prominence / 2`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    fit_segment, seconds_to_samples, synth_toy_waveform, Segment, ToyGeneratorSpec, Waveform,
    SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::evaluation::PairScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpliceScanConfig {
    pub window_s: f64,
    pub stride_s: f64,
    /// In score-sequence samples.
    pub gaussian_sigma: f64,
    pub min_depth: f64,
    /// In score-sequence samples.
    pub min_width: usize,
    /// A track is called spliced when its global score reaches this value.
    pub operating_threshold: f64,
}

impl Default for SpliceScanConfig {
    fn default() -> Self {
        Self {
            window_s: 0.5,
            stride_s: 0.05,
            gaussian_sigma: 1.7,
            min_depth: 0.38,
            min_width: 3,
            operating_threshold: 0.38,
        }
    }
}

impl SpliceScanConfig {
    pub fn window_len(&self) -> usize {
        seconds_to_samples(self.window_s)
    }

    pub fn stride(&self) -> usize {
        seconds_to_samples(self.stride_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len() == 0 || self.stride() == 0 {
            return Err(Error::invalid("window and stride must each span at least one sample"));
        }
        if !(self.gaussian_sigma > 0.0) || self.min_width == 0 {
            return Err(Error::invalid("need gaussian_sigma > 0 and min_width >= 1"));
        }
        Ok(())
    }
}

/// Number of window pairs in a track of `n_samples`: `1 + (n - 2 * window) / stride`,
/// zero when the track is shorter than two windows.
pub fn window_pair_count(n_samples: usize, window_len: usize, stride: usize) -> usize {
    if n_samples < 2 * window_len {
        0
    } else {
        1 + (n_samples - 2 * window_len) / stride
    }
}

/// Start sample of window A of pair `i` (window B starts `window_len` later).
fn pair_start(i: usize, stride: usize) -> usize {
    i * stride
}

/// Adjacent, non-overlapping window pairs: pair `i` has A = `[i*stride, i*stride + win)`
/// and B = `[i*stride + win, i*stride + 2*win)`. Trailing audio that cannot hold a full
/// B window is dropped.
pub fn window_pairs(w: &Waveform, track: &str, cfg: &SpliceScanConfig) -> Result<Vec<(Segment, Segment)>> {
    cfg.validate()?;
    let (win, stride) = (cfg.window_len(), cfg.stride());
    let n = window_pair_count(w.len(), win, stride);
    if n == 0 {
        return Err(Error::invalid(format!(
            "track {track} lasts {:.3} s; scanning needs at least {:.3} s",
            w.duration_s(),
            2.0 * win as f64 / SAMPLE_RATE as f64
        )));
    }
    (0..n)
        .map(|i| {
            let s = pair_start(i, stride);
            Ok((fit_segment(w, track, win, s)?, fit_segment(w, track, win, s + win)?))
        })
        .collect()
}

/// Time (seconds) of the A/B boundary of every pair.
pub fn pair_boundary_times(n_pairs: usize, cfg: &SpliceScanConfig) -> Vec<f64> {
    let (win, stride) = (cfg.window_len(), cfg.stride());
    (0..n_pairs)
        .map(|i| (pair_start(i, stride) + win) as f64 / SAMPLE_RATE as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSequence {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub pair_boundary_times: Vec<f64>,
}

impl ScoreSequence {
    pub fn from_raw(raw: Vec<f64>, cfg: &SpliceScanConfig) -> Result<Self> {
        let smoothed = gaussian_smooth(&raw, cfg.gaussian_sigma)?;
        let pair_boundary_times = pair_boundary_times(raw.len(), cfg);
        Ok(Self {
            raw,
            smoothed,
            pair_boundary_times,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(["boundary_s", "raw", "smoothed"]).map_err(to_err)?;
        for ((t, r), s) in self.pair_boundary_times.iter().zip(&self.raw).zip(&self.smoothed) {
            w.write_record([t.to_string(), r.to_string(), s.to_string()]).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores every window pair of a track. Each distinct window is embedded once.
pub fn score_track(
    scorer: &dyn PairScorer,
    w: &Waveform,
    track: &str,
    cfg: &SpliceScanConfig,
) -> Result<ScoreSequence> {
    cfg.validate()?;
    let (win, stride) = (cfg.window_len(), cfg.stride());
    if scorer.segment_len() != win {
        return Err(Error::Shape(format!(
            "model was trained on {}-sample segments but the scan window is {win} samples",
            scorer.segment_len()
        )));
    }
    let n = window_pair_count(w.len(), win, stride);
    if n == 0 {
        return Err(Error::invalid(format!(
            "track {track} is shorter than two {:.3} s windows",
            cfg.window_s
        )));
    }
    let mut starts: Vec<usize> = (0..n)
        .flat_map(|i| [pair_start(i, stride), pair_start(i, stride) + win])
        .collect();
    starts.sort_unstable();
    starts.dedup();
    let segments = starts
        .iter()
        .map(|&s| fit_segment(w, track, win, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Segment> = segments.iter().collect();
    let emb = scorer.embed(&refs)?;
    let row_of: BTreeMap<usize, usize> = starts.iter().enumerate().map(|(r, &s)| (s, r)).collect();
    let d = emb.ncols();
    let mut e_a = ndarray::Array2::zeros((n, d));
    let mut e_b = ndarray::Array2::zeros((n, d));
    for i in 0..n {
        let s = pair_start(i, stride);
        e_a.row_mut(i).assign(&emb.row(row_of[&s]));
        e_b.row_mut(i).assign(&emb.row(row_of[&(s + win)]));
    }
    ScoreSequence::from_raw(scorer.score(&e_a, &e_b)?, cfg)
}

/// Normalized Gaussian kernel on `[-r, r]`, `r = ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Index into a sequence of length `n` under half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`), valid for any integer offset.
pub fn reflect_index(m: i64, n: usize) -> usize {
    let n = n as i64;
    let m = m.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Gaussian smoothing with reflect boundaries; output length equals input length.
pub fn gaussian_smooth(seq: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot smooth an empty sequence"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    Ok((0..seq.len() as i64)
        .map(|i| {
            k.iter()
                .enumerate()
                .map(|(j, w)| w * seq[reflect_index(i + j as i64 - r, seq.len())])
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub index: usize,
    pub depth: f64,
    pub width: usize,
}

/// Positions of peaks (strict local maxima, flat runs reported at their middle).
pub fn find_peaks(y: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    if y.len() < 3 {
        return peaks;
    }
    let last = y.len() - 1;
    let mut i = 1;
    while i < last {
        if y[i - 1] < y[i] {
            let mut ahead = i + 1;
            while ahead < last && y[ahead] == y[i] {
                ahead += 1;
            }
            if y[ahead] < y[i] {
                peaks.push((i + ahead - 1) / 2);
                i = ahead;
            }
        }
        i += 1;
    }
    peaks
}

/// Topographic prominence of the peak at `p`.
pub fn prominence(y: &[f64], p: usize) -> f64 {
    let h = y[p];
    let mut left_min = h;
    for &v in y[..=p].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &y[p..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Contiguous samples around `p` strictly above `y[p] - prom / 2`.
pub fn half_prominence_width(y: &[f64], p: usize, prom: f64) -> usize {
    let line = y[p] - prom / 2.0;
    let left = y[..p].iter().rev().take_while(|&&v| v > line).count();
    let right = y[p + 1..].iter().take_while(|&&v| v > line).count();
    left + 1 + right
}

/// Minima of `seq` whose depth reaches `min_depth` and whose width reaches `min_width`.
pub fn detect_minima(seq: &[f64], min_depth: f64, min_width: usize) -> Vec<Minimum> {
    let y: Vec<f64> = seq.iter().map(|v| -v).collect();
    find_peaks(&y)
        .into_iter()
        .filter_map(|p| {
            let depth = prominence(&y, p);
            let width = half_prominence_width(&y, p, depth);
            (depth >= min_depth && width >= min_width).then_some(Minimum {
                index: p,
                depth,
                width,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Authentic,
    Spliced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedMinimum {
    pub index: usize,
    pub time_s: f64,
    pub depth: f64,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceReport {
    /// Depth of the deepest detected minimum, 0 without minima.
    pub global_score: f64,
    pub minima: Vec<ReportedMinimum>,
    pub decision: Decision,
    pub operating_threshold: f64,
    /// Boundary time of the deepest minimum.
    pub splice_time_s: Option<f64>,
}

/// Detects minima on the smoothed sequence and turns the deepest one into a track
/// decision.
pub fn splice_report(seq: &ScoreSequence, cfg: &SpliceScanConfig, operating_threshold: f64) -> SpliceReport {
    let minima: Vec<ReportedMinimum> = detect_minima(&seq.smoothed, cfg.min_depth, cfg.min_width)
        .into_iter()
        .map(|m| ReportedMinimum {
            index: m.index,
            time_s: seq.pair_boundary_times[m.index],
            depth: m.depth,
            width: m.width,
        })
        .collect();
    let deepest = minima
        .iter()
        .fold(None::<&ReportedMinimum>, |best, m| match best {
            Some(b) if b.depth >= m.depth => Some(b),
            _ => Some(m),
        });
    let global_score = deepest.map_or(0.0, |m| m.depth);
    SpliceReport {
        global_score,
        decision: if global_score >= operating_threshold && deepest.is_some() {
            Decision::Spliced
        } else {
            Decision::Authentic
        },
        operating_threshold,
        splice_time_s: deepest.map(|m| m.time_s),
        minima,
    }
}

/// A labelled evaluation track.
#[derive(Debug, Clone)]
pub struct LabeledTrack {
    pub name: String,
    pub waveform: Waveform,
    /// Time of the generator switch, `None` for homogeneous tracks.
    pub switch_s: Option<f64>,
    pub generators: (usize, usize),
}

/// A track made of the first `switch_s` seconds of one toy utterance followed by the
/// rest of another, from a different generator.
pub fn synth_spliced_track(
    first: &ToyGeneratorSpec,
    second: &ToyGeneratorSpec,
    seeds: (u64, u64),
    duration_s: f64,
    switch_s: f64,
) -> Result<Waveform> {
    if !(switch_s > 0.0 && switch_s < duration_s) {
        return Err(Error::invalid("switch time must fall inside the track"));
    }
    let a = synth_toy_waveform(first, seeds.0, duration_s)?;
    let b = synth_toy_waveform(second, seeds.1, duration_s)?;
    let cut = seconds_to_samples(switch_s);
    let mut samples = a.samples()[..cut].to_vec();
    samples.extend_from_slice(&b.samples()[cut..]);
    Waveform::new(samples)
}

/// `n_homogeneous` single-generator tracks and `n_spliced` tracks with one switch
/// uniformly placed in `switch_range`, all drawn from `specs`.
pub fn toy_splice_tracks(
    specs: &[ToyGeneratorSpec],
    n_homogeneous: usize,
    n_spliced: usize,
    duration_s: f64,
    switch_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<LabeledTrack>> {
    if specs.len() < 2 {
        return Err(Error::invalid("splice tracks need at least 2 generators"));
    }
    let mut tracks = Vec::with_capacity(n_homogeneous + n_spliced);
    for i in 0..n_homogeneous {
        let g = rng.random_range(0..specs.len());
        tracks.push(LabeledTrack {
            name: format!("homogeneous_{i:03}"),
            waveform: synth_toy_waveform(&specs[g], rng.random(), duration_s)?,
            switch_s: None,
            generators: (specs[g].generator_id, specs[g].generator_id),
        });
    }
    for i in 0..n_spliced {
        let g = rng.random_range(0..specs.len());
        let mut h = rng.random_range(0..specs.len() - 1);
        if h >= g {
            h += 1;
        }
        let switch = rng.random_range(switch_range.0..=switch_range.1);
        let switch = (switch * SAMPLE_RATE as f64).round() / SAMPLE_RATE as f64;
        tracks.push(LabeledTrack {
            name: format!("spliced_{i:03}"),
            waveform: synth_spliced_track(&specs[g], &specs[h], (rng.random(), rng.random()), duration_s, switch)?,
            switch_s: Some(switch),
            generators: (specs[g].generator_id, specs[h].generator_id),
        });
    }
    Ok(tracks)
}
