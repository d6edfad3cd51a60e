mod common;

use std::f64::consts::PI;
use std::path::Path;

use common::*;
use rustfft::{num_complex::Complex, FftPlanner};
use srcverify::checkpoint::{load_extractor, load_head, save_extractor, save_head, Archive};
use srcverify::corpus::{build_toy_manifest, load_waveform, write_waveform, Manifest, Split, SplitRatios, Waveform};
use srcverify::features::{Backbone, Extractor, LcnnConfig, MelSpecConfig};
use srcverify::similarity::{HeadConfig, SimilarityHead};

fn write_wav(path: &Path, rate: u32, channels: u16, frames: &[Vec<f32>]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for frame in frames {
        for &s in frame {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn native_rate_mono_loads_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let samples: Vec<f32> = (0..4000).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect();
    write_wav(&path, 16000, 1, &samples.iter().map(|&s| vec![s]).collect::<Vec<_>>());
    assert_eq!(load_waveform(&path).unwrap().samples(), &samples[..]);
}

#[test]
fn stereo_is_averaged() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.wav");
    write_wav(&path, 16000, 2, &vec![vec![0.5, -0.1]; 100]);
    let w = load_waveform(&path).unwrap();
    assert_eq!(w.len(), 100);
    assert!(w.samples().iter().all(|&s| (s - 0.2).abs() < 1e-6));
}

#[test]
fn double_rate_is_resampled_with_the_tone_kept() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hi.wav");
    let frames: Vec<Vec<f32>> = (0..4 * 32000)
        .map(|i| vec![(0.5 * (2.0 * PI * 1000.0 * i as f64 / 32000.0).sin()) as f32])
        .collect();
    write_wav(&path, 32000, 1, &frames);
    let w = load_waveform(&path).unwrap();
    assert_eq!(w.len(), 64000);
    let mut buf: Vec<Complex<f64>> = w.samples().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let peak = (0..buf.len() / 2)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
        .unwrap();
    let hz = peak as f64 * 16000.0 / buf.len() as f64;
    assert!((hz - 1000.0).abs() <= 1.0, "peak at {hz} Hz");
}

#[test]
fn pcm16_round_trip_is_within_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.wav");
    let samples: Vec<f32> = (0..1000).map(|i| (i as f32 / 1000.0) - 0.5).collect();
    write_waveform(&path, &Waveform::new(samples.clone()).unwrap()).unwrap();
    let back = load_waveform(&path).unwrap();
    for (a, b) in samples.iter().zip(back.samples()) {
        assert!((a - b).abs() <= 1.0 / 32767.0);
    }
}

#[test]
fn missing_and_broken_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_waveform(dir.path().join("nope.wav")).is_err());
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav").unwrap();
    assert!(load_waveform(&junk).is_err());
}

#[test]
fn toy_manifest_round_trips_and_holds_out_generators() {
    let m = build_toy_manifest(8, 5, SplitRatios::default(), 11).unwrap();
    let closed = m.generators(Split::Train);
    assert_eq!(closed, m.generators(Split::Val));
    assert_eq!(m.generators(Split::Test).len(), 2);
    assert!(closed.is_disjoint(&m.generators(Split::Test)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    m.write_jsonl(&path).unwrap();
    let back = Manifest::read_jsonl(&path).unwrap();
    assert_eq!(back.records(), m.records());
    assert_eq!(back.content_hash(), m.content_hash());
    assert_eq!(build_toy_manifest(8, 5, SplitRatios::default(), 11).unwrap().content_hash(), m.content_hash());
}

#[test]
fn checkpoints_restore_identical_models() {
    let lcnn = LcnnConfig {
        channels: [4, 4, 4],
        kernel: 3,
        embedding_dim: 8,
    };
    let mel = MelSpecConfig {
        n_mels: 16,
        ..MelSpecConfig::default()
    };
    let ext = Extractor::new(mel, lcnn, vec![0, 3, 5], 4000, &mut rng(1)).unwrap();
    let head_cfg = HeadConfig {
        embedding_dim: 8,
        projection_dim: 4,
        ..HeadConfig::default()
    };
    let head = SimilarityHead::new(head_cfg, &mut rng(2)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ext_hash = save_extractor(dir.path().join("e.ckpt"), &ext).unwrap();
    save_head(dir.path().join("h.ckpt"), &head, 4000, &ext_hash).unwrap();
    let (ext2, hash2) = load_extractor(dir.path().join("e.ckpt")).unwrap();
    assert_eq!(hash2, ext_hash);
    assert_eq!(ext2.class_labels, vec![0, 3, 5]);

    let probe = srcverify::corpus::Segment {
        samples: (0..4000).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect(),
        origin: srcverify::corpus::SegmentOrigin { track: "p".into(), start: 0 },
    };
    let a = ext.embed_batch(&[&probe]).unwrap();
    let b = ext2.embed_batch(&[&probe]).unwrap();
    assert_eq!(a, b);

    let (head2, meta) = load_head(dir.path().join("h.ckpt"), Some(&ext_hash)).unwrap();
    assert_eq!(head2, head);
    assert_eq!(meta.segment_len, 4000);
    assert!(load_head(dir.path().join("h.ckpt"), Some("0000")).is_err());
    assert!(load_extractor(dir.path().join("h.ckpt")).is_err());

    let bytes = std::fs::read(dir.path().join("e.ckpt")).unwrap();
    assert!(Archive::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}
