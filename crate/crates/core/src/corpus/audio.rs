//! Waveform ingestion and fixed-length segment fitting.

use std::path::Path;

use rubato::{FftFixedInOut, Resampler};

use crate::error::{Error, Result};

/// Every waveform handled by the toolkit is mono at this rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteAudio);
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Where a segment was cut from: the track identifier and the start offset in samples.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentOrigin {
    pub track: String,
    pub start: usize,
}

/// A slice of a waveform fitted to an exact length.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Vec<f32>,
    pub origin: SegmentOrigin,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Converts seconds to a sample count at [`SAMPLE_RATE`], rounding to nearest.
pub fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round().max(0.0) as usize
}

/// Reads a PCM WAV file as a mono 16 kHz waveform.
///
/// Multi-channel files are averaged to mono and other sample rates are resampled.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let channels = spec.channels.max(1) as usize;
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio(path.display().to_string()));
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let mono = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)?
    };
    if mono.is_empty() {
        return Err(Error::EmptyAudio(path.display().to_string()));
    }
    Waveform::new(mono)
}

/// Writes a waveform as 16-bit PCM mono WAV at [`SAMPLE_RATE`].
pub fn write_waveform(path: impl AsRef<Path>, waveform: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in waveform.samples() {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Band-limited resampling of a whole buffer. The output has
/// `round(len * to / from)` samples and is aligned with the input (filter delay removed).
pub fn resample(input: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == to {
        return Ok(input.to_vec());
    }
    const CHUNK: usize = 1024;
    let mut resampler = FftFixedInOut::<f64>::new(from as usize, to as usize, CHUNK, 1)
        .map_err(|e| Error::Resample(e.to_string()))?;
    let expected = (input.len() as f64 * to as f64 / from as f64).round() as usize;
    let delay = resampler.output_delay();
    let mut out: Vec<f64> = Vec::with_capacity(expected + delay + CHUNK);
    let mut pos = 0;
    while out.len() < expected + delay {
        let need = resampler.input_frames_next();
        let mut chunk = vec![0.0f64; need];
        for (dst, src) in chunk.iter_mut().zip(input.iter().skip(pos)) {
            *dst = *src as f64;
        }
        pos += need;
        let produced = resampler
            .process(&[chunk], None)
            .map_err(|e| Error::Resample(e.to_string()))?;
        out.extend_from_slice(&produced[0]);
    }
    Ok(out[delay..delay + expected].iter().map(|&v| v as f32).collect())
}

/// Cuts `target_len` samples starting at `start`. When fewer than `target_len` samples
/// remain after `start`, the remaining samples are repeated cyclically until the target
/// length is reached.
pub fn fit_segment(
    waveform: &Waveform,
    track: &str,
    target_len: usize,
    start: usize,
) -> Result<Segment> {
    if target_len == 0 {
        return Err(Error::invalid("target_len must be positive"));
    }
    let samples = waveform.samples();
    if start >= samples.len() {
        return Err(Error::StartOutOfRange {
            start,
            len: samples.len(),
        });
    }
    let available = &samples[start..];
    let fitted = if available.len() >= target_len {
        available[..target_len].to_vec()
    } else {
        available.iter().copied().cycle().take(target_len).collect()
    };
    Ok(Segment {
        samples: fitted,
        origin: SegmentOrigin {
            track: track.to_string(),
            start,
        },
    })
}
