//! Audio ingestion, manifests, pair sampling and the synthetic toy corpus.

mod audio;
mod manifest;
mod sampling;
mod toy;

pub use audio::{
    fit_segment, load_waveform, resample, seconds_to_samples, write_waveform, Segment,
    SegmentOrigin, Waveform, SAMPLE_RATE,
};
pub use manifest::{stratified_split, AudioRef, Manifest, ManifestRecord, Split};
pub use sampling::{
    pair_from_indices, sample_class_balanced_index, sample_class_balanced_segment, sample_pair,
    sample_pair_indices, PairSample, StartMode, UtterancePool,
};
pub use toy::{
    build_toy_manifest, random_generator_specs, synth_toy_waveform, SplitRatios,
    ToyGeneratorSpec, MAX_COMB_F0, MIN_COMB_F0, TOY_DURATION_RANGE,
};
