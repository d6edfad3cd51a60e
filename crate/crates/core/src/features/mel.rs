//! Log-mel spectrogram frontend.
//!
//! Framing has no centre padding: frame `t` covers samples
//! `[t * hop_length, t * hop_length + win_length)`, so a signal of `n` samples yields
//! `1 + (n - win_length) / hop_length` frames. Each frame is Hamming-windowed
//! (periodic), zero-padded to `n_fft`, and its power spectrum is projected onto a
//! Slaney-style mel filterbank with area-normalized triangles, then compressed with
//! `ln(x + 1e-10)`.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::SAMPLE_RATE;
use crate::error::{Error, Result};

pub const LOG_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpecConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_mels: usize,
}

impl Default for MelSpecConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            win_length: 400,
            hop_length: 160,
            f_min: 20.0,
            f_max: 7600.0,
            n_mels: 80,
        }
    }
}

impl MelSpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::invalid("win_length must be in [1, n_fft]"));
        }
        if self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::invalid("hop_length and n_mels must be positive"));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= SAMPLE_RATE as f64 / 2.0)
        {
            return Err(Error::invalid("need 0 <= f_min < f_max <= sample_rate / 2"));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.win_length).then(|| 1 + (n_samples - self.win_length) / self.hop_length)
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Log-mel energies, `n_mels x n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub values: Array2<f64>,
}

impl MelSpec {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Precomputed window, FFT plan and filterbank for one [`MelSpecConfig`].
#[derive(Clone)]
pub struct MelFrontend {
    cfg: MelSpecConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `n_mels x (n_fft / 2 + 1)`
    filterbank: Array2<f64>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: MelSpecConfig) -> Result<Self> {
        cfg.validate()?;
        let window = (0..cfg.win_length)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / cfg.win_length as f64).cos()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let filterbank = mel_filterbank(&cfg);
        Ok(Self {
            cfg,
            window,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &MelSpecConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Centre frequency (Hz) of each mel filter.
    pub fn center_frequencies(&self) -> Vec<f64> {
        mel_points_hz(&self.cfg)[1..=self.cfg.n_mels].to_vec()
    }

    pub fn compute(&self, samples: &[f32]) -> Result<MelSpec> {
        let cfg = &self.cfg;
        let n_frames = cfg.n_frames(samples.len()).ok_or_else(|| {
            Error::Shape(format!(
                "{} samples is shorter than one {}-sample window",
                samples.len(),
                cfg.win_length
            ))
        })?;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut power = Array2::<f64>::zeros((n_bins, n_frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &samples[t * cfg.hop_length..t * cfg.hop_length + cfg.win_length];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < cfg.win_length {
                    Complex::new(frame[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                power[[k, t]] = buf[k].norm_sqr();
            }
        }
        let mut mel = self.filterbank.dot(&power);
        mel.mapv_inplace(|v| (v + LOG_EPSILON).ln());
        Ok(MelSpec { values: mel })
    }
}

fn mel_points_hz(cfg: &MelSpecConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

fn mel_filterbank(cfg: &MelSpecConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let points = mel_points_hz(cfg);
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / cfg.n_fft as f64;
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let norm = 2.0 / (right - left);
        for k in 0..n_bins {
            let f = bin_hz(k);
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            fb[[m, k]] = rise.min(fall).max(0.0) * norm;
        }
    }
    fb
}

/// Convenience wrapper building a frontend for a single call.
pub fn mel_spectrogram(samples: &[f32], cfg: &MelSpecConfig) -> Result<MelSpec> {
    MelFrontend::new(cfg.clone())?.compute(samples)
}
