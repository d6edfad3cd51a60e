mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use common::*;
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
use srcverify::checkpoint::state_hash;
use srcverify::corpus::{
    build_toy_manifest, ManifestRecord, Split, SplitRatios, UtterancePool, Waveform,
};
use srcverify::features::{Extractor, LcnnConfig, MelSpecConfig, TrainingPhase};
use srcverify::nn::Adam;
use srcverify::similarity::{HeadConfig, SimilarityHead};
use srcverify::training::*;
use srcverify::Error;

fn records(per_label: &[usize]) -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    for (label, &n) in per_label.iter().enumerate() {
        for i in 0..n {
            out.push(ManifestRecord {
                audio_ref: format!("g{label}/u{i}.wav"),
                generator_label: label,
                split: Split::Train,
                duration_s: 1.0,
                toy_spec: None,
            });
        }
    }
    out
}

#[test]
fn split_keeps_rounded_share_per_generator() {
    let (train, val) = split_stratified(records(&[10]), 0.7, &mut rng(0)).unwrap();
    assert_eq!((train.len(), val.len()), (7, 3));
    let (train, val) = split_stratified(records(&[9]), 0.7, &mut rng(0)).unwrap();
    assert!(train.len() == 6 || train.len() == 7);
    assert_eq!(train.len() + val.len(), 9);
}

#[test]
fn split_is_a_partition_covering_every_generator() {
    let input = records(&[5, 8, 2, 13]);
    let (train, val) = split_stratified(input.clone(), 0.7, &mut rng(4)).unwrap();
    let refs = |v: &[ManifestRecord]| v.iter().map(|r| r.audio_ref.clone()).collect::<BTreeSet<_>>();
    let (a, b) = (refs(&train), refs(&val));
    assert!(a.is_disjoint(&b));
    assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), refs(&input));
    for g in 0..4 {
        assert!(train.iter().any(|r| r.generator_label == g));
        assert!(val.iter().any(|r| r.generator_label == g));
    }
    assert!(split_stratified(records(&[1, 4]), 0.7, &mut rng(0)).is_err());
}

fn tiny_phase1() -> Phase1Config {
    Phase1Config {
        epochs: 2,
        batch_size: 4,
        samples_per_epoch: Some(8),
        plateau_patience: 1,
        early_stop: 2,
        segment_s: 0.25,
        mel: MelSpecConfig {
            n_mels: 16,
            ..MelSpecConfig::default()
        },
        lcnn: LcnnConfig {
            channels: [4, 4, 4],
            kernel: 3,
            embedding_dim: 8,
        },
        ..Phase1Config::default()
    }
}

fn tiny_phase2(strategy: Strategy) -> Phase2Config {
    Phase2Config {
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        strategy,
        pairs_per_epoch: Some(8),
        plateau_patience: 1,
        early_stop: 2,
        segment_s: 0.25,
        val_pairs: 8,
        head: HeadConfig {
            embedding_dim: 8,
            projection_dim: 4,
            ..HeadConfig::default()
        },
        ..Phase2Config::default()
    }
}

fn tiny_pools() -> (UtterancePool, UtterancePool) {
    let manifest = build_toy_manifest(4, 6, SplitRatios::default(), 3).unwrap();
    load_train_val_pools(&manifest, Path::new("."), 0.7, &mut rng(1)).unwrap()
}

fn hash(mut ext: Extractor) -> String {
    state_hash(&mut ext)
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let (train, val) = tiny_pools();
    let run = || {
        let mut r = rng(9);
        let (ext, rep1) = train_extractor(&train, &val, &tiny_phase1(), &mut r).unwrap();
        let out = train_similarity(&ext, &train, &val, &tiny_phase2(Strategy::Unfrozen), &mut r).unwrap();
        let mut head = out.head.clone();
        (hash(ext), rep1, hash(out.extractor), state_hash(&mut head), out.report)
    };
    assert_eq!(run(), run());
}

#[test]
fn phases_tag_and_freeze_extractors() {
    let (train, val) = tiny_pools();
    let mut r = rng(2);
    let (ext, report) = train_extractor(&train, &val, &tiny_phase1(), &mut r).unwrap();
    assert_eq!(ext.phase, TrainingPhase::Phase1);
    assert_eq!(report.phase, TrainingPhase::Phase1);

    let frozen = train_similarity(&ext, &train, &val, &tiny_phase2(Strategy::Frozen), &mut r).unwrap();
    assert_eq!(hash(frozen.extractor.clone()), hash(ext.clone()));
    assert_eq!(frozen.extractor.phase, TrainingPhase::Phase1);
    assert_eq!(frozen.report.strategy, Some(Strategy::Frozen));

    let unfrozen = train_similarity(&ext, &train, &val, &tiny_phase2(Strategy::Unfrozen), &mut r).unwrap();
    assert_eq!(unfrozen.extractor.phase, TrainingPhase::Phase2);
    assert_ne!(hash(unfrozen.extractor), hash(ext));
}

#[test]
fn untrained_or_mismatched_extractors_are_rejected() {
    let (train, val) = tiny_pools();
    let cfg = tiny_phase1();
    let fresh = Extractor::new(cfg.mel.clone(), cfg.lcnn.clone(), vec![0, 1, 2], 4000, &mut rng(0)).unwrap();
    let err = train_similarity(&fresh, &train, &val, &tiny_phase2(Strategy::Frozen), &mut rng(0));
    assert!(matches!(err, Err(Error::InvalidArgument(_))));

    let (ext, _) = train_extractor(&train, &val, &cfg, &mut rng(0)).unwrap();
    let mut wide = tiny_phase2(Strategy::Frozen);
    wide.head.embedding_dim = 16;
    assert!(matches!(
        train_similarity(&ext, &train, &val, &wide, &mut rng(0)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn one_generator_cannot_train_source_tracing() {
    let wave = Arc::new(Waveform::new(vec![0.1; 8000]).unwrap());
    let recs = records(&[3]);
    let pool = UtterancePool::from_parts(recs.clone(), vec![wave.clone(); 3]);
    let err = train_extractor(&pool, &pool, &tiny_phase1(), &mut rng(0));
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn loss_on_duplicated_identical_pairs_descends() {
    let cfg = HeadConfig {
        embedding_dim: 6,
        projection_dim: 4,
        dropout: 0.0,
        ..HeadConfig::default()
    };
    let mut r = rng(31);
    let mut head = SimilarityHead::new(cfg, &mut r).unwrap();
    let distinct = random_matrix(4, 6, &mut r);
    let e = ndarray::concatenate![ndarray::Axis(0), distinct, distinct];
    let labels = [1; 8];
    let mut opt = Adam::new(1e-4);
    let losses: Vec<f64> = (0..6)
        .map(|_| head_step(&mut head, &mut opt, &e, &e, &labels, &mut r).unwrap())
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn reports_keep_the_best_validation_epoch() {
    let (train, val) = tiny_pools();
    let cfg = Phase1Config { epochs: 3, ..tiny_phase1() };
    let (_, report) = train_extractor(&train, &val, &cfg, &mut rng(5)).unwrap();
    let best = report
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, best);
    assert_eq!(report.epochs[report.best_epoch].val_loss, best);
    assert_eq!(report.checkpoint_epochs.last(), Some(&report.best_epoch));
}

/// Independent re-statement of the schedule rules: returns the learning rate after each
/// epoch and the epoch at which training stops, if any.
fn schedule_oracle(losses: &[f64], lr0: f64, factor: f64, patience: usize, stop: usize) -> (Vec<f64>, Option<usize>) {
    let mut lr = lr0;
    let mut lrs = Vec::new();
    let (mut plateau_best, mut bad) = (f64::INFINITY, 0);
    let (mut stop_best, mut since) = (f64::INFINITY, 0);
    for (epoch, &l) in losses.iter().enumerate() {
        if l < stop_best {
            stop_best = l;
            since = 0;
        } else {
            since += 1;
        }
        if l < plateau_best {
            plateau_best = l;
            bad = 0;
        } else {
            bad += 1;
            if bad == patience + 1 {
                lr *= factor;
                bad = 0;
            }
        }
        lrs.push(lr);
        if since >= stop {
            return (lrs, Some(epoch));
        }
    }
    (lrs, None)
}

proptest! {
    #[test]
    fn schedulers_follow_the_oracle(
        losses in prop::collection::vec(0u8..6, 1..40),
        patience in 0usize..5,
        extra in 0usize..5,
    ) {
        let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
        let stop = patience + extra;
        let (expected_lrs, expected_stop) = schedule_oracle(&losses, 1.0, 0.5, patience, stop.max(1));
        let mut plateau = ReduceLrOnPlateau::new(0.5, patience);
        let mut stopper = EarlyStopping::new(stop.max(1));
        let mut lr = 1.0;
        let mut stopped = None;
        for (epoch, &l) in losses.iter().enumerate() {
            stopper.update(l);
            let before = lr;
            plateau.step(l, &mut lr);
            prop_assert!(lr <= before);
            prop_assert_eq!(lr, expected_lrs[epoch]);
            if stopper.should_stop() {
                stopped = Some(epoch);
                break;
            }
        }
        prop_assert_eq!(stopped, expected_stop);
    }
}
