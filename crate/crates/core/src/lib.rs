//! Semi-supervised automatic music transcription.
//!
//! Audio is turned into normalized log-mel spectrograms ([`audio`]), a U-net
//! transcriber with a relative local self-attention head predicts onset and
//! frame posteriorgrams ([`model`]), and training combines a supervised loss,
//! a spectrogram reconstruction loop and timestep-normalized virtual
//! adversarial training on labelled and unlabelled audio ([`vat`],
//! [`training`]). Predictions are scored with frame, note and
//! note-with-offset metrics ([`metrics`]).

pub mod audio;
pub mod config;
pub mod datasets;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod training;
pub mod transcribe;
pub mod vat;

pub use error::{Error, Result};

/// Sample rate every clip is resampled to before feature extraction.
pub const SAMPLE_RATE: u32 = 16_000;
/// STFT hop in samples.
pub const HOP_LENGTH: usize = 512;
/// Hann window / FFT size in samples.
pub const WINDOW_LENGTH: usize = 2048;
/// Mel bins.
pub const N_MELS: usize = 229;
/// Piano keys, A0 (MIDI 21) to C8 (MIDI 108).
pub const N_PITCHES: usize = 88;
/// MIDI number of the lowest key.
pub const MIN_MIDI: u8 = 21;
/// MIDI number of the highest key.
pub const MAX_MIDI: u8 = 108;
/// Training segment length in samples (640 frames).
pub const SEGMENT_SAMPLES: usize = 327_680;

/// Frames per second of every roll and spectrogram.
pub fn frame_rate() -> f64 {
    SAMPLE_RATE as f64 / HOP_LENGTH as f64
}
