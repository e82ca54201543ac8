//! Audio front-end: resampling, random cropping, log-mel spectrograms and
//! WAV input/output.

mod mel;
mod resample;
mod wav;

pub use mel::{log_normalize, mel_spectrogram, MelConfig, MelExtractor, MelSpectrogram, LOG_FLOOR};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Crops `length` samples starting at a uniformly drawn offset. Clips
/// shorter than `length` are returned from offset 0 with trailing zeros.
pub fn crop_segment(clip: &AudioClip, length: usize, seed: u64) -> AudioClip {
    let max_offset = clip.samples.len().saturating_sub(length);
    let offset = if max_offset == 0 {
        0
    } else {
        ChaCha8Rng::seed_from_u64(seed).gen_range(0..=max_offset)
    };
    crop_at(clip, offset, length)
}

/// `length` samples from `offset`, zero-padded past the end of the clip.
pub fn crop_at(clip: &AudioClip, offset: usize, length: usize) -> AudioClip {
    let mut samples = vec![0.0f32; length];
    if offset < clip.samples.len() {
        let available = (clip.samples.len() - offset).min(length);
        samples[..available].copy_from_slice(&clip.samples[offset..offset + available]);
    }
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}
