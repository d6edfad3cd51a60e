//! Log-mel frontend and the feature-extractor backbone.

mod extractor;
mod lcnn;
mod mel;

pub use extractor::{
    embed_in_chunks, embed_utterances, Backbone, Embedding, Extractor, TrainingPhase,
    INFERENCE_CHUNK, LCNN_BACKBONE_ID,
};
pub use lcnn::{LcnnConfig, LcnnNet, LcnnTape};
pub use mel::{
    hz_to_mel, mel_spectrogram, mel_to_hz, MelFrontend, MelSpec, MelSpecConfig, LOG_EPSILON,
};
