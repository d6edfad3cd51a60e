//! Procedural "generators" for desk-scale experiments.
//!
//! Each toy generator leaves a fingerprint made of four parts: the fundamental of a
//! harmonic comb, an all-pole spectral coloration, an additive noise floor and a
//! decimate/upsample bandwidth limit. Utterances of one generator share the
//! fingerprint and differ in harmonic amplitudes, phases and amplitude modulation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::audio::{Waveform, SAMPLE_RATE};
use super::manifest::{stratified_split, AudioRef, Manifest, ManifestRecord, Split};
use crate::error::{Error, Result};

pub const MIN_COMB_F0: f64 = 80.0;
pub const MAX_COMB_F0: f64 = 400.0;
const PEAK_LEVEL: f32 = 0.9;
const MAX_HARMONIC_HZ: f64 = 7600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGeneratorSpec {
    pub generator_id: usize,
    /// Fundamental of the harmonic comb in Hz.
    pub comb_f0: f64,
    /// All-pole coefficients `a1..ap` of `y[n] = x[n] - sum_k a_k y[n-k]`. Empty is identity.
    pub iir_coloration: Vec<f64>,
    /// Noise RMS relative to the colored signal RMS; `-inf` disables the noise.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub noise_floor_db: f64,
    pub codec_decimation: usize,
    pub rng_seed: u64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

impl ToyGeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_COMB_F0..=MAX_COMB_F0).contains(&self.comb_f0) {
            return Err(Error::invalid(format!(
                "comb_f0 {} outside [{MIN_COMB_F0}, {MAX_COMB_F0}] Hz",
                self.comb_f0
            )));
        }
        if self.codec_decimation == 0 {
            return Err(Error::invalid("codec_decimation must be at least 1"));
        }
        if self.iir_coloration.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("iir_coloration must be finite"));
        }
        Ok(())
    }
}

/// Synthesizes one utterance of `spec`. Deterministic in `(spec, utterance_seed, duration_s)`.
pub fn synth_toy_waveform(
    spec: &ToyGeneratorSpec,
    utterance_seed: u64,
    duration_s: f64,
) -> Result<Waveform> {
    spec.validate()?;
    if !(duration_s >= 0.5) {
        return Err(Error::invalid(format!(
            "toy utterances need at least 0.5 s, got {duration_s}"
        )));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.rng_seed ^ utterance_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let mut signal = harmonic_comb(spec.comb_f0, n, &mut rng);
    all_pole_filter(&mut signal, &spec.iir_coloration);

    if spec.noise_floor_db.is_finite() {
        let rms = (signal.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let sigma = rms * 10f64.powf(spec.noise_floor_db / 20.0);
        for v in signal.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }

    if spec.codec_decimation > 1 {
        signal = band_limit(&signal, spec.codec_decimation);
    }

    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 {
        PEAK_LEVEL as f64 / peak
    } else {
        0.0
    };
    Waveform::new(signal.iter().map(|v| (v * gain) as f32).collect())
}

/// Amplitude-modulated harmonic comb with random per-harmonic amplitude and phase.
fn harmonic_comb(f0: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n_harmonics = (MAX_HARMONIC_HZ / f0).floor() as usize;
    let am_rate: f64 = rng.random_range(2.5..6.0);
    let am_depth: f64 = rng.random_range(0.5..0.9);
    let am_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0.0f64; n];
    for k in 1..=n_harmonics {
        let amp = rng.random_range(0.3..1.0) / (k as f64).powf(0.7);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let omega = 2.0 * PI * f0 * k as f64 / SAMPLE_RATE as f64;
        // phasor recursion, re-anchored periodically to bound drift
        let (step_s, step_c) = omega.sin_cos();
        let mut i = 0;
        while i < n {
            let (mut s, mut c) = (omega * i as f64 + phase).sin_cos();
            let end = (i + 1024).min(n);
            for v in &mut out[i..end] {
                *v += amp * s;
                let ns = s * step_c + c * step_s;
                c = c * step_c - s * step_s;
                s = ns;
            }
            i = end;
        }
    }
    let am_omega = 2.0 * PI * am_rate / SAMPLE_RATE as f64;
    for (i, v) in out.iter_mut().enumerate() {
        let env = 1.0 - am_depth * 0.5 * (1.0 + (am_omega * i as f64 + am_phase).sin());
        *v *= env;
    }
    out
}

fn all_pole_filter(signal: &mut [f64], coeffs: &[f64]) {
    if coeffs.is_empty() {
        return;
    }
    for n in 0..signal.len() {
        let mut acc = signal[n];
        for (k, a) in coeffs.iter().enumerate() {
            if n > k {
                acc -= a * signal[n - k - 1];
            }
        }
        signal[n] = acc;
    }
}

/// Hamming-windowed sinc lowpass, unit DC gain. `cutoff` in cycles per sample.
fn lowpass_taps(cutoff: f64, n_taps: usize) -> Vec<f64> {
    let mid = (n_taps - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n_taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Zero-phase FIR filtering (odd tap count, centred), same output length.
fn fir_same(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = taps.len() / 2;
    let n = signal.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let idx = i as isize + j as isize - half as isize;
                if idx >= 0 && (idx as usize) < n {
                    acc += t * signal[idx as usize];
                }
            }
            acc
        })
        .collect()
}

/// Decimates by `factor` and upsamples back, leaving a signal band-limited to
/// `fs / (2 * factor)`.
fn band_limit(signal: &[f64], factor: usize) -> Vec<f64> {
    let taps = lowpass_taps(0.45 / factor as f64, 8 * factor * 2 + 1);
    let filtered = fir_same(signal, &taps);
    let mut stuffed = vec![0.0; signal.len()];
    for i in (0..signal.len()).step_by(factor) {
        stuffed[i] = filtered[i] * factor as f64;
    }
    fir_same(&stuffed, &taps)
}

/// Fractions used to partition a toy corpus. `test` is the fraction of generators held
/// out entirely (open-set); `train : val` splits the utterances of the remaining
/// generators, stratified per generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 6 of 8 generators closed-set with a 70/30 train/val utterance split.
    fn default() -> Self {
        Self {
            train: 0.525,
            val: 0.225,
            test: 0.25,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("split ratios must lie in [0, 1]"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        if self.train <= 0.0 || self.val <= 0.0 || self.test <= 0.0 {
            return Err(Error::invalid("every split ratio must be positive"));
        }
        Ok(())
    }

    pub fn train_fraction_of_closed_set(&self) -> f64 {
        self.train / (self.train + self.val)
    }
}

/// Draws `n` pairwise-distinct generator fingerprints. The comb fundamentals are
/// stratified over `[80, 400]` Hz so that no two generators share one.
pub fn random_generator_specs(n: usize, rng: &mut impl Rng) -> Vec<ToyGeneratorSpec> {
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    let width = (MAX_COMB_F0 - MIN_COMB_F0) / n as f64;
    strata
        .into_iter()
        .enumerate()
        .map(|(id, stratum)| {
            let comb_f0 = MIN_COMB_F0 + width * (stratum as f64 + rng.random_range(0.15..0.85));
            let n_pole_pairs = rng.random_range(1..=2);
            let mut poly = vec![1.0];
            for _ in 0..n_pole_pairs {
                let radius: f64 = rng.random_range(0.6..0.95);
                let angle: f64 = rng.random_range(0.05 * PI..0.85 * PI);
                let section = [1.0, -2.0 * radius * angle.cos(), radius * radius];
                poly = poly_mul(&poly, &section);
            }
            ToyGeneratorSpec {
                generator_id: id,
                comb_f0,
                iir_coloration: poly[1..].to_vec(),
                noise_floor_db: rng.random_range(-45.0..-15.0),
                codec_decimation: rng.random_range(1..=4),
                rng_seed: rng.random(),
            }
        })
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Utterance durations of the toy corpus are drawn uniformly from this range (seconds).
pub const TOY_DURATION_RANGE: (f64, f64) = (2.5, 5.5);

/// Builds a lazily synthesized toy manifest. Closed-set generators get labels
/// `0..n_closed` and are split train/val; the remaining generators are `test` only.
pub fn build_toy_manifest(
    n_generators: usize,
    utterances_per_gen: usize,
    ratios: SplitRatios,
    rng_seed: u64,
) -> Result<Manifest> {
    if n_generators < 4 {
        return Err(Error::invalid(format!(
            "a toy corpus needs at least 4 generators, got {n_generators}"
        )));
    }
    if utterances_per_gen < 2 {
        return Err(Error::invalid("need at least 2 utterances per generator"));
    }
    ratios.validate()?;
    let n_test = ((n_generators as f64 * ratios.test).round() as usize).clamp(1, n_generators - 2);
    let n_closed = n_generators - n_test;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let specs = random_generator_specs(n_generators, &mut rng);

    let mut closed = Vec::new();
    let mut test = Vec::new();
    for spec in &specs {
        for _ in 0..utterances_per_gen {
            let duration_s = rng.random_range(TOY_DURATION_RANGE.0..TOY_DURATION_RANGE.1);
            let duration_s = (duration_s * 1000.0).round() / 1000.0;
            let record = ManifestRecord {
                audio_ref: AudioRef::Seed(rng.random()).to_string(),
                generator_label: spec.generator_id,
                split: Split::Test,
                duration_s,
                toy_spec: Some(spec.clone()),
            };
            if spec.generator_id < n_closed {
                closed.push(record);
            } else {
                test.push(record);
            }
        }
    }

    let (mut train, mut val) =
        stratified_split(closed, ratios.train_fraction_of_closed_set(), &mut rng)?;
    train.iter_mut().for_each(|r| r.split = Split::Train);
    val.iter_mut().for_each(|r| r.split = Split::Val);

    let mut records = train;
    records.extend(val);
    records.extend(test);
    Manifest::new(records)
}
